"""Command-line runner: ground states, approximations, sweeps, reductions, checks.

Every subcommand writes JSON with sorted keys and two-space indent, and CSV
with a header row and LF line endings. Invalid input exits with status 2,
construction failures with status 1.
"""

from __future__ import annotations

import csv
import io
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import click
import numpy as np

from . import hamiltonian as ham
from . import mps as mpslib
from .numerics import LocalMpsError

MODELS = ("hz", "tfim")
METHODS = ("part1", "part2", "circuit")
ED_MAX_SITES = 14
STATE_BYTES_CAP = 256 * 1024**2


class InputError(click.UsageError):
    """Invalid user input; click maps it to exit status 2."""


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, allow_nan=False, default=_json_default) + "\n"


def _json_default(x):
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return _finite(float(x))
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _finite(v: float):
    return v if np.isfinite(v) else None


def _clean(obj):
    """Replace non-finite floats by None so every output is strict JSON."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, (float, np.floating)):
        return _finite(float(obj))
    if isinstance(obj, np.integer):
        return int(obj)
    return obj


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _csv_text(header: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for r in rows:
        w.writerow({k: _csv_cell(r.get(k)) for k in header})
    return buf.getvalue()


def _csv_cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _build_model(model: str, n: int, t: float | None, j: float, h: float,
                 boundary: str = "absorbed") -> ham.NnHamiltonian:
    if n < 2:
        raise InputError("--n must be at least 2")
    if model == "hz":
        if t is None:
            raise InputError("model hz needs --t")
        if not 0.0 <= t <= 0.5:
            raise InputError(f"--t must lie in [0, 0.5], got {t}")
        return ham.build_hz(t, n)
    return ham.build_tfim(n, j, h, boundary=boundary)


def _load_state(path: str) -> mpslib.Mps:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"input file {path} does not exist")
    try:
        return mpslib.from_json(p.read_text(encoding="utf-8"))
    except (ValueError, KeyError, LocalMpsError) as exc:
        raise InputError(f"cannot read an MPS from {path}: {exc}") from exc


def _fail(msg: str) -> None:
    click.echo(f"error: {msg}", err=True)
    sys.exit(1)


@click.group()
@click.option("--seed", type=int, default=0, show_default=True, help="Seed for every random choice.")
@click.option("--threads", type=click.IntRange(min=1), default=None,
              help="Worker processes for sweeps (default: logical cores).")
@click.pass_context
def main(ctx: click.Context, seed: int, threads: int | None) -> None:
    """Locally accurate MPS approximations of 1D states."""
    ctx.ensure_object(dict)
    ctx.obj["seed"] = seed
    ctx.obj["threads"] = threads or os.cpu_count() or 1
    if "LOCALMPS_CAP_BYTES" in os.environ:
        try:
            mpslib.op_cap_bytes()
        except LocalMpsError as exc:
            raise InputError(str(exc)) from exc


# ---------------------------------------------------------------------------
# ground


@main.command()
@click.option("--model", type=click.Choice(MODELS), required=True)
@click.option("--n", "n_sites", type=int, required=True)
@click.option("--t", "t_param", type=float, default=None, help="Field of the hz model.")
@click.option("--j", "j_coupling", type=float, default=1.0, show_default=True)
@click.option("--h", "h_field", type=float, default=2.0, show_default=True)
@click.option("--solver", type=click.Choice(["auto", "ed", "dmrg"]), default="auto", show_default=True)
@click.option("--chi", type=click.IntRange(min=1), default=32, show_default=True)
@click.option("--sweeps", type=click.IntRange(min=1), default=6, show_default=True)
@click.option("--out", "out_prefix", type=click.Path(), default="ground", show_default=True,
              help="Writes PREFIX.mps.json and PREFIX.spectrum.json.")
@click.pass_context
def ground(ctx, model, n_sites, t_param, j_coupling, h_field, solver, chi, sweeps, out_prefix):
    """Ground state of a model chain (ED for small N, DMRG otherwise)."""
    h = _build_model(model, n_sites, t_param, j_coupling, h_field)
    use_ed = solver == "ed" or (solver == "auto" and n_sites <= ED_MAX_SITES)
    try:
        if use_ed:
            info = ham.ed_ground_state(h)
            state = mpslib.from_dense(info.ground_state, h.site_dim, n_sites)
            spec = {"solver": "ed", "ground_energy": info.ground_energy, "gap": info.gap,
                    "degenerate": bool(info.degenerate)}
            energy = info.ground_energy
        else:
            state, energy = ham.dmrg_ground_state(h, chi, sweeps, seed=ctx.obj["seed"])
            spec = {"solver": "dmrg", "ground_energy": energy, "gap": None, "degenerate": None,
                    "chi": chi, "sweeps": sweeps}
    except LocalMpsError as exc:
        _fail(str(exc))
    spec.update({"model": model, "n_sites": n_sites, "energy_original_units": h.to_original_energy(energy),
                 "parameters": {"t": t_param, "j": j_coupling, "h": h_field}})
    _write_text(Path(f"{out_prefix}.mps.json"), mpslib.to_json(state) + "\n")
    _write_text(Path(f"{out_prefix}.spectrum.json"), _dump_json(_clean(spec)))
    click.echo(_dump_json(_clean(spec)), nl=False)


# ---------------------------------------------------------------------------
# approx


def _run_method(psi: mpslib.Mps, method: str, k: int, eps, l, t, chi_p):
    """(report, state or None) for one approximation run."""
    from .circuit_approx import build_theorem2
    from .local_approx import build_part1, build_part2

    if method == "circuit":
        if l is None:
            raise InputError("method circuit needs --l")
        state, circuit, report = build_theorem2(psi, l, k)
        return report, state
    if method == "part1":
        sup, report = build_part1(psi, k, eps=eps, l=l)
    else:
        sup, report = build_part2(psi, k, eps=eps, chi_p=chi_p, l=l, t=t)
    return report, sup


def _state_bytes(profile, d: int) -> int:
    bonds = [1, *profile, 1]
    return int(sum(bonds[i] * d * bonds[i + 1] * 16 for i in range(len(bonds) - 1)))


def _materialize(result, report, d: int, cap: int):
    if isinstance(result, mpslib.Mps):
        return result
    if _state_bytes(report.bond_profile, d) > cap:
        return None
    return mpslib.compress(result.to_mps(), 2**62)


def _parse_chi_p(value: str):
    if value == "auto":
        return "auto"
    try:
        v = int(value)
    except ValueError as exc:
        raise InputError(f"--chi-p must be an integer or 'auto', got {value!r}") from exc
    if v < 1:
        raise InputError("--chi-p must be positive")
    return v


def _check_common(k, eps, l):
    if k < 1:
        raise InputError("--k must be positive")
    if eps is not None and not 0.0 < eps < 1.0:
        raise InputError(f"--eps must lie in (0, 1), got {eps}")
    if l is not None and l < 1:
        raise InputError("--l must be positive")


@main.command()
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--in", "in_path", type=str, required=True, help="Input MPS JSON.")
@click.option("--k", type=int, default=2, show_default=True)
@click.option("--eps", type=float, default=None)
@click.option("--l", type=int, default=None)
@click.option("--t", type=int, default=None)
@click.option("--chi-p", "chi_p", type=str, default="auto", show_default=True)
@click.option("--coarse-grain", type=click.IntRange(min=1), default=1, show_default=True,
              help="Merge this many neighboring sites before building.")
@click.option("--max-state-bytes", type=click.IntRange(min=0), default=STATE_BYTES_CAP, show_default=True,
              help="Skip writing the approximating MPS when it would be larger.")
@click.option("--out", "out_prefix", type=click.Path(), default="approx", show_default=True,
              help="Writes PREFIX.mps.json, PREFIX.report.json and PREFIX.windows.csv.")
def approx(method, in_path, k, eps, l, t, chi_p, coarse_grain, max_state_bytes, out_prefix):
    """Build a (k, eps)-local approximation of an input MPS."""
    _check_common(k, eps, l)
    chi = _parse_chi_p(chi_p)
    psi = _load_state(in_path)
    if coarse_grain > 1:
        if psi.n_sites % coarse_grain:
            raise InputError(f"{psi.n_sites} sites do not split into groups of {coarse_grain}")
        psi = mpslib.coarse_grain(psi, coarse_grain)
    psi = mpslib.normalize(psi)
    start = time.perf_counter()
    try:
        report, result = _run_method(psi, method, k, eps, l, t, chi)
        state = _materialize(result, report, psi.site_dim, max_state_bytes)
    except LocalMpsError as exc:
        _fail(f"{type(exc).__name__}: {exc}")
    out = report.to_dict()
    out["wall_time_s"] = time.perf_counter() - start
    out["state_written"] = state is not None
    out["bond_bound_ok"] = bool(not np.isfinite(report.bond_bound) or report.max_bond <= report.bond_bound)
    if state is not None:
        _write_text(Path(f"{out_prefix}.mps.json"), mpslib.to_json(state) + "\n")
    _write_text(Path(f"{out_prefix}.report.json"), _dump_json(_clean(out)))
    rows = report.measured_local_error.rows() if report.measured_local_error else []
    _write_text(Path(f"{out_prefix}.windows.csv"), _csv_text(["start", "value"], rows))
    summary = {k_: out.get(k_) for k_ in ("method", "max_bond", "bond_bound", "bond_bound_ok",
                                           "error_bound", "state_written")}
    if report.measured_local_error is not None:
        summary["measured_local_error"] = report.measured_local_error.max_value
    click.echo(_dump_json(_clean(summary)), nl=False)


# ---------------------------------------------------------------------------
# sweep

SWEEP_HEADER = ["method", "point", "k", "eps", "l", "t", "chi_p", "measured_error",
                "error_bound", "max_bond", "bond_bound", "wall_time_s", "status", "message"]


def _sweep_point(args: tuple) -> dict:
    psi_json, method, point, k, eps, l, t = args
    psi = mpslib.from_json(psi_json)
    row = {"method": method, "point": point, "k": k, "eps": eps}
    pl, pchi = l, "auto"
    if method == "part2":
        pchi = point
    else:
        pl = point
    start = time.perf_counter()
    try:
        report, _ = _run_method(psi, method, k, eps, pl, t, pchi)
    except (LocalMpsError, click.UsageError) as exc:
        row.update(status="error", message=f"{type(exc).__name__}: {exc}",
                   wall_time_s=time.perf_counter() - start)
        return row
    p = report.parameters
    row.update(
        l=p.get("l"), t=p.get("t"), chi_p=p.get("chi_p"),
        measured_error=report.measured_local_error.max_value if report.measured_local_error else None,
        error_bound=_finite(float(report.error_bound)), max_bond=report.max_bond,
        bond_bound=_finite(float(report.bond_bound)), wall_time_s=time.perf_counter() - start,
        status="ok", message="",
    )
    return row


def _parse_points(text: str) -> list[int]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise InputError("--points must list at least one value")
    try:
        pts = [int(p) for p in parts]
    except ValueError as exc:
        raise InputError(f"--points must be comma-separated integers, got {text!r}") from exc
    if min(pts) < 1:
        raise InputError("sweep points must be positive")
    return pts


@main.command()
@click.option("--method", type=click.Choice(METHODS), required=True)
@click.option("--in", "in_path", type=str, required=True)
@click.option("--points", type=str, required=True,
              help="Comma-separated values of chi_p (part2) or l (part1, circuit).")
@click.option("--k", type=int, default=2, show_default=True)
@click.option("--eps", type=float, default=None)
@click.option("--l", type=int, default=None, help="Fixed l for part2 sweeps.")
@click.option("--t", type=int, default=None)
@click.option("--coarse-grain", type=click.IntRange(min=1), default=1, show_default=True)
@click.option("--out", "out_path", type=click.Path(), default="sweep.csv", show_default=True)
@click.pass_context
def sweep(ctx, method, in_path, points, k, eps, l, t, coarse_grain, out_path):
    """Run one approximation per parameter point and tabulate the results."""
    pts = _parse_points(points)
    _check_common(k, eps, l)
    psi = _load_state(in_path)
    if coarse_grain > 1:
        if psi.n_sites % coarse_grain:
            raise InputError(f"{psi.n_sites} sites do not split into groups of {coarse_grain}")
        psi = mpslib.coarse_grain(psi, coarse_grain)
    psi_json = mpslib.to_json(mpslib.normalize(psi))
    jobs = [(psi_json, method, p, k, eps, l, t) for p in pts]
    workers = min(ctx.obj["threads"], len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, jobs))
    else:
        rows = [_sweep_point(j) for j in jobs]
    _write_text(Path(out_path), _csv_text(SWEEP_HEADER, rows))
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        click.echo(f"warning: point {r['point']} failed: {r['message']}", err=True)
    click.echo(f"wrote {len(rows)} rows to {out_path}")
    if len(failed) == len(rows):
        sys.exit(1)


# ---------------------------------------------------------------------------
# reduce


@main.command()
@click.option("--model", type=click.Choice(MODELS), required=True)
@click.option("--n", "n_sites", type=int, required=True)
@click.option("--eps", type=float, required=True)
@click.option("--t", "t_param", type=float, default=None)
@click.option("--j", "j_coupling", type=float, default=1.0, show_default=True)
@click.option("--h", "h_field", type=float, default=2.0, show_default=True)
@click.option("--site", type=int, default=0, show_default=True, help="Ancilla site queried by the oracle.")
@click.option("--out", "out_path", type=click.Path(), default="reduce.json", show_default=True)
def reduce(model, n_sites, eps, t_param, j_coupling, h_field, site, out_path):
    """Estimate the ground energy density by binary search over local queries."""
    from .reduction import estimate_energy_density, max_calls

    if not 0.0 < eps < 1.0:
        raise InputError(f"--eps must lie in (0, 1), got {eps}")
    # the probe construction needs equal bond terms
    h = _build_model(model, n_sites, t_param, j_coupling, h_field, boundary="uniform")
    if not 0 <= site < n_sites:
        raise InputError(f"--site must lie in [0, {n_sites})")
    try:
        info = ham.ed_ground_state(h)
        if info.degenerate:
            _fail("the ground state is degenerate; the oracle promise does not hold")
        est, trace = estimate_energy_density(h, eps, site=site)
    except LocalMpsError as exc:
        _fail(f"{type(exc).__name__}: {exc}")
    out = trace.to_dict()
    out.update({
        "model": model, "n_sites": n_sites, "eps": eps, "max_calls": max_calls(eps),
        "exact_density": info.ground_energy / (n_sites - 1),
        "parameters": {"t": t_param, "j": j_coupling, "h": h_field},
    })
    _write_text(Path(out_path), _dump_json(_clean(out)))
    click.echo(_dump_json(_clean({"estimate": est, "calls": trace.calls,
                                  "exact_density": out["exact_density"]})), nl=False)


# ---------------------------------------------------------------------------
# verify


def _verify_suites(seed: int, count: int) -> dict:
    from .absorb import absorb_entropy
    from .metrics import fidelity, purified_distance, trace_distance
    from .numerics import numerical_rank, partial_trace, random_state

    rng = np.random.default_rng(seed)
    out = {}

    worst_marg, rank_ok = 0.0, True
    for _ in range(count):
        da, db = rng.integers(1, 7, size=2)
        ta = _random_density(int(da), rng)
        tb = _random_density(int(db), rng)
        res = absorb_entropy(ta, tb)
        worst_marg = max(worst_marg,
                         trace_distance(partial_trace(res.joint, [da, db], [0]), ta),
                         trace_distance(partial_trace(res.joint, [da, db], [1]), tb))
        r = numerical_rank(np.linalg.eigvalsh(res.joint)[::-1])
        ra = numerical_rank(np.linalg.eigvalsh(ta)[::-1])
        rb = numerical_rank(np.linalg.eigvalsh(tb)[::-1])
        rank_ok &= r <= max(ra, rb)
    out["absorb"] = {"max_marginal_error": worst_marg, "rank_bound_holds": bool(rank_ok),
                     "ok": bool(rank_ok and worst_marg <= 1e-9)}

    worst = -np.inf
    for _ in range(count):
        dim = int(rng.integers(2, 7))
        a, b = _random_density(dim, rng), _random_density(dim, rng)
        d1, dp = trace_distance(a, b), purified_distance(a, b)
        worst = max(worst, d1 - dp, dp - np.sqrt(2 * d1))
    out["metric_sandwich"] = {"max_violation": float(worst), "ok": bool(worst <= 1e-9)}

    ratio_ok = True
    for _ in range(max(1, count // 10)):
        d = int(rng.integers(2, 4))
        n = int(rng.integers(3, 8))
        vec = random_state(d**n, rng)
        prof = [1, *mpslib.bond_profile(mpslib.from_dense(vec, d, n)), 1]
        ratio_ok &= all(prof[i + 1] <= d * prof[i] and prof[i] <= d * prof[i + 1] for i in range(len(prof) - 1))
    out["bond_ratio"] = {"ok": bool(ratio_ok)}

    worst_f = 0.0
    for _ in range(count):
        da, db = int(rng.integers(2, 5)), int(rng.integers(2, 5))
        u, v = random_state(da * db, rng), random_state(da * db, rng)
        ru = partial_trace(np.outer(u, u.conj()), [da, db], [0])
        rv = partial_trace(np.outer(v, v.conj()), [da, db], [0])
        # best overlap over unitaries on B equals the nuclear norm of A_u^dagger A_v
        mu, mv = u.reshape(da, db), v.reshape(da, db)
        best = float(np.sum(np.linalg.svd(mu.conj().T @ mv, compute_uv=False)))
        worst_f = max(worst_f, abs(best - fidelity(ru, rv)))
    out["uhlmann"] = {"max_difference": worst_f, "ok": bool(worst_f <= 1e-8)}
    out["ok"] = all(v["ok"] for v in out.values())
    return out


def _random_density(dim: int, rng: np.random.Generator) -> np.ndarray:
    rank = int(rng.integers(1, dim + 1))
    g = rng.standard_normal((dim, rank)) + 1j * rng.standard_normal((dim, rank))
    m = g @ g.conj().T
    return m / np.trace(m).real


@main.command()
@click.option("--count", type=click.IntRange(min=1), default=50, show_default=True,
              help="Random instances per suite.")
@click.option("--out", "out_path", type=click.Path(), default=None)
@click.pass_context
def verify(ctx, count, out_path):
    """Run the invariant suites on random instances; exit 1 if any fails."""
    res = _verify_suites(ctx.obj["seed"], count)
    text = _dump_json(_clean(res))
    if out_path:
        _write_text(Path(out_path), text)
    click.echo(text, nl=False)
    if not res["ok"]:
        sys.exit(1)


if __name__ == "__main__":
    main()

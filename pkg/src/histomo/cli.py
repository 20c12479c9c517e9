"""Command-line front end.

Every subcommand writes its files and prints one ``key=value`` summary line.
Exit codes: 0 success, 1 usage error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import bragg, diffraction, distribution, doppler, levelset, phantoms, plotting, radon
from .core import HistomoError, read_grid, write_grid

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def summary(**kv) -> str:
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.6g}"
        return str(v)

    return " ".join(f"{k}={fmt(v)}" for k, v in kv.items())


def _out_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _angles(n: int) -> np.ndarray:
    return np.pi * np.arange(n) / n


def _offsets(grid, n: int) -> np.ndarray:
    # rays cover the whole box diagonal
    half = max(abs(np.asarray(grid.origin)).max(), abs(np.asarray(grid.upper)).max()) * np.sqrt(2)
    return np.linspace(-half, half, n)


def _value_edges(grid, nbins: int) -> np.ndarray:
    lo, hi = float(grid.values.min()), float(grid.values.max())
    if lo > 0:
        lo = 0.0
    span = hi - lo or 1.0
    return radon.centered_edges(lo, hi + 1e-6 * span, nbins)


# --- subcommands -------------------------------------------------------------------


def cmd_phantom(a) -> str:
    make = phantoms.PHANTOMS_2D[a.name]
    g = make(a.n)
    out = _out_dir(a.out_dir)
    write_grid(g, out / f"{a.name}.htgd")
    plotting.write_pgm(g, out / f"{a.name}.pgm")
    plotting.image_png(out / f"{a.name}.png", g, title=a.name)
    return summary(command="phantom", name=a.name, n=a.n, min=g.values.min(), max=g.values.max())


def _load_input(a):
    if a.input:
        return read_grid(a.input)
    return phantoms.PHANTOMS_2D[a.phantom](a.n)


def cmd_sinogram(a) -> str:
    g = _load_input(a)
    sino = radon.radon(g, _angles(a.angles), _offsets(g, a.offsets))
    out = _out_dir(a.out_dir)
    radon.write_sinogram_csv(sino, out / "sinogram.csv")
    plotting.image_png(out / "sinogram.png", sino.values.T, title="sinogram",
                       extent=(0, 180, sino.ps[0], sino.ps[-1]))
    rec = radon.fbp(sino, g.like(np.zeros(g.dims)))
    err = np.linalg.norm(rec.values - g.values) / np.linalg.norm(g.values)
    return summary(command="sinogram", rays=sino.values.size, fbp_rel_l2=err)


def cmd_hist_sinogram(a) -> str:
    g = _load_input(a)
    edges = _value_edges(g, a.bins)
    hs = radon.hist_radon(g, _angles(a.angles), _offsets(g, a.offsets), edges)
    out = _out_dir(a.out_dir)
    radon.write_histogram_sinogram_csv(hs, out / "hist_sinogram.csv", out / "edges.csv")
    total = hs.total()
    i = a.angles // 2
    j = int(np.argmax(total[i]))
    mids = 0.5 * (edges[1:] + edges[:-1])
    plotting.lines_png(out / "ray_histogram.png", mids, {"mass": hs.mass[i, j]},
                       xlabel="value", ylabel="length", title="one ray", steps=True)
    return summary(command="hist-sinogram", rays=total.size, bins=a.bins, max_chord=total.max())


def cmd_moments(a) -> str:
    g = _load_input(a)
    thetas, ps = _angles(a.angles), _offsets(g, a.offsets)
    hs = radon.hist_radon(g, thetas, ps, _value_edges(g, a.bins))
    out = _out_dir(a.out_dir)
    res = {}
    errs = []
    for k in range(1, a.kmax + 1):
        m = radon.moment_sinogram(hs, k)
        ref = radon.radon(g.like(g.values**k), thetas, ps)
        e = np.abs(m.values - ref.values).max() / np.abs(ref.values).max()
        res[f"max_rel_err_k{k}"] = e
        errs.append(e)
        radon.write_sinogram_csv(m, out / f"moment_k{k}.csv")
    plotting.lines_png(out / "moment_errors.png", np.arange(1, a.kmax + 1), {"max rel err": errs},
                       xlabel="k", ylabel="max relative discrepancy", logy=True)
    return summary(command="moments", **res)


def cmd_levelset(a) -> str:
    g = _load_input(a)
    thetas, ps = _angles(a.angles), _offsets(g, a.offsets)
    edges = _value_edges(g, a.bins)
    hs = radon.hist_radon(g, thetas, ps, edges)
    idx = np.unique(np.round(np.linspace(0, a.bins - 1, a.levels + 2)[1:-1]).astype(int))
    stack = levelset.level_stack(hs, idx, g)
    rec = levelset.assemble(stack, float(g.values.min()), float(g.values.max()))
    err = np.linalg.norm(rec.values - g.values) / np.linalg.norm(g.values)
    out = _out_dir(a.out_dir)
    write_grid(rec, out / "levelset_recon.htgd")
    levelset.write_stack(stack, out / "levels")
    plotting.panels_png(out / "levelset_recon.png", [g, rec], ["phantom", "layer cake"])
    plotting.write_pgm(rec, out / "levelset_recon.pgm")
    return summary(command="levelset-recon", levels=len(idx), rel_l2=err)


DOPPLER_DEFAULTS = {
    "extent": 3.0,
    "directions": 60,
    "offsets": 40,
    "bins": 512,
    "lam": doppler.DEFAULT_LAMBDA,
    "tau_det": doppler.DEFAULT_TAU,
    "method": "hessian",
    "iters": 400,
}


def load_config(path, defaults: dict) -> dict:
    """JSON object whose keys must be a subset of ``defaults``; types follow the defaults."""
    with open(path) as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise UsageError("config must be a JSON object")
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    cfg = dict(defaults)
    for k, v in raw.items():
        want = type(defaults[k])
        if want is float and isinstance(v, int) and not isinstance(v, bool):
            v = float(v)
        if not isinstance(v, want) or isinstance(v, bool) != (want is bool):
            raise UsageError(f"config key {k!r} must be {want.__name__}")
        cfg[k] = v
    return cfg


def cmd_doppler(a) -> str:
    from .tensor import fibonacci_directions, hlrt, parallel_ray_set

    cfg = load_config(a.config, DOPPLER_DEFAULTS) if a.config else dict(DOPPLER_DEFAULTS)
    if cfg["method"] not in ("hessian", "poisson"):
        raise UsageError("method must be 'hessian' or 'poisson'")
    L = cfg["extent"]
    u, du = phantoms.windowed_gaussian(a.grid, half=L, radius=L)
    base, xi = parallel_ray_set(fibonacci_directions(cfg["directions"]), cfg["offsets"], L * np.sqrt(3))
    vmax = du.max_abs() * 1.01
    hs = hlrt(du, (base, xi), np.linspace(-vmax, vmax, cfg["bins"] + 1))
    rec = doppler.recover_potential(hs, u, lam=cfg["lam"], iters=cfg["iters"], method=cfg["method"],
                                    tau_rel=cfg["tau_det"])
    err = doppler.min_sign_error(rec.u_plus, u)
    out = _out_dir(a.out_dir)
    write_grid(rec.u_plus, out / "u_recovered.htgd")
    sgn = 1.0 if np.linalg.norm(rec.u_plus.values - u.values) <= np.linalg.norm(rec.u_plus.values + u.values) else -1.0
    mid = a.grid // 2
    plotting.panels_png(out / "doppler_slice.png", [u.values[:, :, mid], sgn * rec.u_plus.values[:, :, mid]],
                        ["true u", "recovered u"], extent=(-L, L, -L, L))
    return summary(command="doppler-recon", grid=a.grid, rel_l2_min_sign=err,
                   degenerate=int(rec.degenerate.sum()), domain=int(rec.domain.sum()))


def _strain_law(name: str, n: int = 20000):
    q = (np.arange(n) + 0.5) / n
    if name == "atom":
        return np.array([0.001]), np.array([1.0])
    if name == "two-atom":
        return np.array([0.0, 0.002]), np.array([1.0, 1.0])
    if name == "uniform":
        return 0.002 * q, np.ones(n)
    if name == "gauss-mix":
        from scipy.stats import norm

        lo, hi = q[: n // 2] * 2, q[n // 2:] * 2 - 1
        s = np.concatenate([norm.ppf(lo) * 1e-4 + 3e-4, norm.ppf(hi) * 2e-4 + 1.5e-3])
        return s, np.ones(n)
    raise UsageError(f"unknown strain law {name!r}")


STRAIN_WINDOW = (-0.001, 0.003)


def cmd_bragg_sim(a) -> str:
    strains, w = _strain_law(a.law)
    model = bragg.EdgeModel(a.lambda_e, a.slope, a.intercept)
    lam = bragg.wavelength_window(*STRAIN_WINDOW, model, a.samples)
    sp = bragg.simulate_spectrum(strains, w, model, lam)
    out = _out_dir(a.out_dir)
    bragg.write_spectrum_csv(sp, out / "spectrum.csv")
    plotting.lines_png(out / "spectrum.png", lam, {"T": sp.transmission}, xlabel="wavelength (A)",
                       ylabel="transmission", title=f"{a.law} strain")
    mean = float(np.average(strains, weights=w))
    return summary(command="bragg-sim", law=a.law, samples=a.samples, mean_strain=mean)


def cmd_bragg_extract(a) -> str:
    from scipy.stats import wasserstein_distance

    sp = bragg.read_spectrum_csv(a.input)
    model = bragg.EdgeModel(a.lambda_e, a.slope, a.intercept)
    edges = model.strain(sp.wavelengths)
    h = bragg.extract_histogram(sp, model, edges)
    out = _out_dir(a.out_dir)
    plotting.write_csv(out / "strain_histogram.csv", ["strain_lo", "strain_hi", "mass"],
                       [(float(lo), float(hi), float(m)) for lo, hi, m in zip(edges[:-1], edges[1:], h.mass)])
    plotting.lines_png(out / "strain_histogram.png", h.midpoints, {"density": h.density},
                       xlabel="strain", ylabel="density", steps=True)
    res = {"command": "bragg-extract", "mean_strain": float(np.sum(h.midpoints * h.mass) / h.total)}
    if a.law:
        s, w = _strain_law(a.law)
        res["w1_over_bin"] = wasserstein_distance(s, h.midpoints, w, h.mass + 1e-300) / np.diff(edges).mean()
    return summary(**res)


def _curve(name: str, n: int):
    if name == "a1":
        return diffraction.a1_curve(n)
    if name == "identity":
        s = np.pi * np.arange(n) / n
        return diffraction.TransverseCurve(s, np.ones(n), np.zeros(n), np.ones(n), closed=True)
    if name == "diag21":
        s = np.pi * np.arange(n) / n
        return diffraction.TransverseCurve(s, 2 * np.ones(n), np.zeros(n), np.ones(n), closed=True)
    raise UsageError(f"unknown curve {name!r}")


def _slice_l1(p, q, inner=slice(1, -1)) -> float:
    return max(np.abs(p.mass[i, inner] - q.mass[i, inner]).sum() / p.mass[i].sum() for i in range(len(p.thetas)))


def _theta_spread(dp) -> float:
    """Largest L1 distance of any slice from the first, relative to its mass."""
    return max(np.abs(m - dp.mass[0]).sum() / dp.mass[0].sum() for m in dp.mass)


def _pattern_png(path, dp, title):
    plotting.image_png(path, dp.mass / np.diff(dp.q_edges), title=title,
                       extent=(0, 180, dp.q_edges[0], dp.q_edges[-1]))


def cmd_diffract(a) -> str:
    c = _curve(a.curve, a.samples)
    ths = _angles(a.angles)
    edges = np.linspace(a.q_lo, a.q_hi, a.bins + 1)
    dp = diffraction.pattern_from_curve(c, ths, edges)
    out = _out_dir(a.out_dir)
    diffraction.write_pattern_csv(dp, out / "pattern.csv")
    _pattern_png(out / "pattern.png", dp, f"pattern of {a.curve}")
    return summary(command="diffract", curve=a.curve, theta_spread=_theta_spread(dp),
                   mass_error=np.abs(dp.totals() - c.length).max())


def cmd_nonunique(a) -> str:
    ths = _angles(a.angles)
    edges = np.linspace(1.0, 2.0, a.bins + 1)
    c1 = diffraction.a1_curve(a.samples)
    p1 = diffraction.pattern_from_curve(c1, ths, edges)
    c2 = diffraction.build_equivalent_uniaxial(p1.slice(0), a.samples)
    p2 = diffraction.pattern_from_curve(c2, ths, edges)
    out = _out_dir(a.out_dir)
    diffraction.write_pattern_csv(p1, out / "pattern_a1.csv")
    diffraction.write_pattern_csv(p2, out / "pattern_a2.csv")
    mids = 0.5 * (edges[1:] + edges[:-1])
    w = np.diff(edges)
    plotting.lines_png(out / "nonunique.png", mids, {"A1": p1.mass[0] / w, "A2": p2.mass[0] / w},
                       xlabel="q = r^-2", ylabel="density", title="theta = 0 slice", logy=True)
    spread = _theta_spread(p1)
    return summary(command="nonunique-demo", l1_mismatch=_slice_l1(p1, p2), theta_spread=spread)


def cmd_render_ellipses(a) -> str:
    c = diffraction.a1_curve(a.samples)
    out = _out_dir(a.out_dir)
    dims = (a.size, a.size)
    quarter = diffraction.render_ellipse_superposition(c, dims, (0.0, np.pi / 2))
    half = diffraction.render_ellipse_superposition(c, dims, (0.0, np.pi))
    plotting.write_pgm(quarter, out / "ellipses_quarter.pgm")
    plotting.write_pgm(half, out / "ellipses_half.pgm")
    plotting.panels_png(out / "ellipses.png", [quarter, half], ["quarter turn", "half turn"], cmap="gray_r")
    asym = np.abs(half.values - np.rot90(half.values)).sum() / half.values.sum()
    return summary(command="render-fig5", rot90_asym_half=asym)


def selftest_checks(rng):
    """Named oracle checks; each returns True on success."""
    checks = {}

    def annulus():
        p = np.linspace(-0.9, 0.9, 37)
        edges = np.concatenate([p - 0.01, [p[-1] + 0.01]])
        dens = radon.thin_annulus_projection(edges, 1e-3, n_phi=50_000)
        mid = 0.5 * (edges[1:] + edges[:-1])
        ok = np.abs(mid) <= 0.9
        return np.all(np.abs(dens[ok] / radon.oracle_circle_delta(mid[ok]) - 1) <= 0.02)

    checks["thin_annulus"] = annulus

    def line_delta():
        for _ in range(5):
            t = rng.normal(size=3)
            t /= np.linalg.norm(t)
            if abs(t[2]) < 0.2:
                continue
            if not np.isclose(radon.oracle_line_delta_plane_transform(t), 1 / abs(t[2])):
                return False
        return True

    checks["line_delta"] = line_delta

    def adjugate():
        A = rng.normal(size=(1000, 3, 3))
        adj = doppler.adjugate3(A)
        eye = np.einsum("n,ij->nij", doppler.det3(A), np.eye(3))
        return np.abs(A @ adj - eye).max() <= 1e-12 * max(1.0, np.abs(A).max() ** 3)

    checks["adjugate"] = adjugate

    def moments_spot():
        g = phantoms.gaussian(64)
        th, ps = _angles(20), _offsets(g, 48)
        hs = radon.hist_radon(g, th, ps, _value_edges(g, 512))
        ref = radon.radon(g.like(g.values**2), th, ps).values
        m = radon.moment_sinogram(hs, 2).values
        return np.abs(m - ref).max() <= 0.01 * np.abs(ref).max()

    checks["moment_identity"] = moments_spot

    def cubic():
        x = np.linspace(0, 7, 70001)
        h = distribution.bin_samples(phantoms.three_root_cubic(x), x[1] - x[0], np.linspace(-28, 32, 301))
        vals = distribution.critical_values(h)
        return any(abs(v - 24.06) < 0.3 for v in vals) and any(abs(v - 11.79) < 0.3 for v in vals)

    checks["cubic_critical_values"] = cubic

    def cone():
        ok1, t1 = diffraction.cone_membership(diffraction.direction_vector(np.pi / 4))
        ok2, _ = diffraction.cone_membership([1.0, 1.0, 1.0])
        return ok1 and abs(t1 - np.pi / 4) < 1e-9 and not ok2

    checks["cone"] = cone

    def a1():
        uvw = diffraction.a1_curve(64).uvw
        return np.allclose(uvw[:, 0], 3, atol=1e-12) and np.allclose(uvw[:, 1] ** 2 + uvw[:, 2] ** 2, 1, atol=1e-12)

    checks["a1_circle"] = a1
    return checks


def cmd_selftest(a) -> str:
    rng = np.random.default_rng(a.seed)
    passed, failed = 0, []
    for name, fn in selftest_checks(rng).items():
        try:
            ok = bool(fn())
        except Exception:  # a crashing check counts as a failure
            ok = False
        if ok:
            passed += 1
        else:
            failed.append(name)
    if a.out_dir:
        # distribution of the cubic, as a binned density table and plot
        out = _out_dir(a.out_dir)
        x = np.linspace(0, 7, 70001)
        edges = np.linspace(-28, 32, 301)
        h = distribution.bin_samples(phantoms.three_root_cubic(x), x[1] - x[0], edges)
        plotting.write_csv(out / "cubic_distribution.csv", ["y", "density"],
                           [(float(y), float(d)) for y, d in zip(h.midpoints, h.density)])
        plotting.lines_png(out / "cubic_distribution.png", h.midpoints, {"density": h.density},
                           xlabel="y", ylabel="length per unit y", logy=True, steps=True)
    res = {"command": "selftest", "passed": passed, "failed": len(failed)}
    if failed:
        res["failures"] = ",".join(failed)
    return summary(**res)


# --- parser ------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="histomo", description="histogram tomography toolkit")
    p.add_argument("--threads", type=int, default=1, help="BLAS/OpenMP thread count")
    p.add_argument("--seed", type=int, default=0)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def with_input(sp, angles, offsets):
        sp.add_argument("--input", help="HTGD grid; default is a built-in phantom")
        sp.add_argument("--phantom", default="gaussian", choices=sorted(phantoms.PHANTOMS_2D))
        sp.add_argument("--n", type=int, default=128)
        sp.add_argument("--angles", type=int, default=angles)
        sp.add_argument("--offsets", type=int, default=offsets)
        sp.add_argument("--out-dir", default=".")

    s = sub.add_parser("phantom")
    s.add_argument("--name", default="gaussian", choices=sorted(phantoms.PHANTOMS_2D))
    s.add_argument("--n", type=int, default=128)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(fn=cmd_phantom)

    s = sub.add_parser("sinogram")
    with_input(s, 180, 256)
    s.set_defaults(fn=cmd_sinogram)

    s = sub.add_parser("hist-sinogram")
    with_input(s, 90, 128)
    s.add_argument("--bins", type=int, default=512)
    s.set_defaults(fn=cmd_hist_sinogram)

    s = sub.add_parser("moments")
    with_input(s, 90, 128)
    s.add_argument("--bins", type=int, default=512)
    s.add_argument("--kmax", type=int, default=4)
    s.set_defaults(fn=cmd_moments)

    s = sub.add_parser("levelset-recon")
    with_input(s, 180, 256)
    s.add_argument("--bins", type=int, default=512)
    s.add_argument("--levels", type=int, default=64)
    s.set_defaults(fn=cmd_levelset, phantom="radial")

    s = sub.add_parser("doppler-recon")
    s.add_argument("--grid", type=int, default=24)
    s.add_argument("--config", help="JSON with keys " + ", ".join(DOPPLER_DEFAULTS))
    s.add_argument("--out-dir", default=".")
    s.set_defaults(fn=cmd_doppler)

    def edge_model(sp):
        sp.add_argument("--lambda-e", type=float, default=4.0)
        sp.add_argument("--slope", type=float, default=0.05)
        sp.add_argument("--intercept", type=float, default=0.5)
        sp.add_argument("--out-dir", default=".")

    laws = ["atom", "two-atom", "uniform", "gauss-mix"]
    s = sub.add_parser("bragg-sim")
    s.add_argument("--law", default="uniform", choices=laws)
    s.add_argument("--samples", type=int, default=512)
    edge_model(s)
    s.set_defaults(fn=cmd_bragg_sim)

    s = sub.add_parser("bragg-extract")
    s.add_argument("--input", required=True)
    s.add_argument("--law", choices=laws, help="compare with this input law")
    edge_model(s)
    s.set_defaults(fn=cmd_bragg_extract)

    s = sub.add_parser("diffract")
    s.add_argument("--curve", default="a1", choices=["a1", "identity", "diag21"])
    s.add_argument("--samples", type=int, default=4096)
    s.add_argument("--bins", type=int, default=256)
    s.add_argument("--angles", type=int, default=12)
    s.add_argument("--q-lo", type=float, default=0.9)
    s.add_argument("--q-hi", type=float, default=2.1)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(fn=cmd_diffract)

    s = sub.add_parser("nonunique-demo")
    s.add_argument("--samples", type=int, default=4096)
    s.add_argument("--bins", type=int, default=256)
    s.add_argument("--angles", type=int, default=12)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(fn=cmd_nonunique)

    s = sub.add_parser("render-fig5")
    s.add_argument("--samples", type=int, default=1024)
    s.add_argument("--size", type=int, default=256)
    s.add_argument("--out-dir", default=".")
    s.set_defaults(fn=cmd_render_ellipses)

    s = sub.add_parser("selftest")
    s.add_argument("--out-dir", help="also write the cubic distribution table and plot here")
    s.set_defaults(fn=cmd_selftest)
    return p


def run(argv=None, stdout=None) -> int:
    stdout = stdout or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_help())
        if args.threads < 1:
            raise UsageError("--threads must be >= 1")
    except UsageError as e:
        sys.stderr.write(str(e).rstrip() + "\n")
        return EXIT_USAGE
    from threadpoolctl import threadpool_limits

    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=args.threads):
            line = args.fn(args)
    except UsageError as e:
        sys.stderr.write(str(e).rstrip() + "\n")
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError) as e:
        sys.stderr.write(f"error: {e}\n")
        return EXIT_USAGE
    except (HistomoError, np.linalg.LinAlgError, FloatingPointError, ValueError) as e:
        sys.stderr.write(f"numerical failure: {e}\n")
        return EXIT_NUMERIC
    sys.stderr.write(f"{args.command} took {time.perf_counter() - t0:.1f} s\n")
    stdout.write(line + "\n")
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()

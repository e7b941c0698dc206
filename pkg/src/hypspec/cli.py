"""Command-line entry points: ``hypspec {graph,cell,assemble,pinch,mc,bounds}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from pathlib import Path
from typing import Literal

import numpy as np
import scipy.sparse as sp
import pydantic
from pydantic import BaseModel, ConfigDict, Field, field_validator

from . import bounds, diffusion_mc, fem_hyperbolic as fem, graph_spectra as gs
from . import hyp_core as hc, modeled_surface as ms
from .config import NumericalError, ValidationError
from .io_utils import atomic_write_bytes, atomic_write_json, atomic_write_text

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class CellModel(_Strict):
    v: int = Field(ge=1)
    cuff_length: float = Field(gt=0)
    topology: Literal["pants_ring", "torus_with_v_holes"] = "pants_ring"
    funnels: list[bool] = []

    def spec(self) -> hc.CellSpec:
        return hc.CellSpec(v=self.v, cuff_length=self.cuff_length, topology=self.topology,
                           funnels=tuple(self.funnels))


class GraphModel(_Strict):
    kind: Literal["lattice", "regular_tree", "cayley_ball", "explicit"]
    d: int | None = Field(default=None, ge=1, le=2)
    v: int | None = Field(default=None, ge=3)
    depth: int | None = Field(default=None, ge=0)
    radius: int | None = Field(default=None, ge=0)
    preset: str | None = None
    rank: int | None = Field(default=None, ge=1)
    n: int | None = None
    edges: list[tuple[int, int]] | None = None
    boundary: list[int] | None = None
    valence: int | None = None
    file: str | None = None

    @field_validator("file")
    @classmethod
    def _exists(cls, value):
        if value is not None and not Path(value).is_file():
            raise ValueError(f"graph file {value} does not exist")
        return value

    def build(self, radius: int | None = None) -> gs.Graph:
        if self.kind == "explicit":
            if self.file is not None:
                return gs.Graph.from_json(Path(self.file).read_text())
            if not self.n:
                raise ValidationError("explicit graph needs at least one vertex")
            return gs.explicit(self.n, self.edges or [], self.boundary or (), self.valence)
        kw = self.model_dump(exclude_none=True, exclude={"kind", "file"})
        if radius is not None:
            kw["depth" if self.kind == "regular_tree" else "radius"] = radius
        try:
            return gs.build_graph(self.kind, **kw)
        except KeyError as exc:
            raise ValidationError(f"graph spec missing {exc}") from None


class MCModel(_Strict):
    n_paths: int = Field(default=100_000, ge=1000)
    t_max: float = Field(default=10.0, gt=0)
    seed: int = Field(default=0, ge=0)
    domain: Literal["path", "collar"] = "path"
    collar_length: float = Field(default=1.0, gt=0)


class RunManifest(_Strict):
    cell: CellModel | None = None
    graph: GraphModel | None = None
    radii: list[int] = []
    epsilons: list[float] = []
    mc: MCModel = MCModel()
    out_dir: str = "out"
    mesh_h: float = Field(default=0.1, gt=0, le=1.0)
    r_trunc: float = Field(default=3.0, ge=1.0)

    @field_validator("radii")
    @classmethod
    def _radii(cls, value):
        if any(r < 0 for r in value) or sorted(set(value)) != list(value):
            raise ValueError("radii must be distinct, nonnegative and increasing")
        return value

    @field_validator("epsilons")
    @classmethod
    def _eps(cls, value):
        if any(not 0.05 <= e <= 1 for e in value):
            raise ValueError("epsilons must lie in [0.05, 1]")
        return value


def _need(value, name):
    if value is None or (isinstance(value, list) and not value):
        raise ValidationError(f"manifest needs '{name}' for this command")
    return value


def _csv(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows([_fmt(x) for x in row] for row in rows)
    atomic_write_text(path, buf.getvalue())


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    if x is None:
        return ""
    return str(x)


def _plot(path, xs, series, xlabel, ylabel, logy=False):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logy:
        ax.set_yscale("log")
    ax.legend()
    fig.tight_layout()
    buf = io.BytesIO()
    fig.savefig(buf, format="svg", metadata={"Date": None})
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def cmd_graph(man: RunManifest, out: Path, plot: bool) -> None:
    spec = _need(man.graph, "graph")
    graphs = [spec.build(r) for r in man.radii] if man.radii else [spec.build()]
    rows = []
    witness = {}
    for g in graphs:
        if g.n == 0:
            raise ValidationError("empty graph")
        m0 = gs.mu0(g, dirichlet_on_boundary=bool(g.boundary.any()) and bool((~g.boundary).any()))
        inside = int((~g.boundary).sum())
        mode = "exhaustive" if inside <= 16 else "folner_balls"
        est = gs.cheeger(g, mode=mode)
        v = g.max_valence
        rows.append((g.name, g.n, inside, m0, est.lower, est.upper, est.method, v,
                     est.upper**2 / (2 * v) <= m0 + 1e-10, m0 <= est.upper + 1e-10))
        witness[g.name] = list(est.witness_subset or ())
    _csv(out / "graph_spectra.csv", ["graph", "vertices", "interior", "mu0", "h_lower", "h_upper",
                                      "method", "valence", "lower_holds", "upper_holds"], rows)
    atomic_write_json(out / "cheeger_witness.json", witness)


def cmd_cell(man: RunManifest, out: Path, plot: bool) -> None:
    spec = _need(man.cell, "cell").spec()
    rows = []
    last = None
    for h in (man.mesh_h, man.mesh_h / 2):
        mesh = fem.mesh_cell(spec, h, r_trunc=man.r_trunc)
        tags = [t for t in mesh.loops if t.startswith("funnel")]
        res = fem.solve_mesh(mesh, tags, count=3)
        psi_cuff = fem.cuff_mean(mesh, res, "cuff0") if "cuff0" in mesh.loops else float("nan")
        rows.append((h, mesh.n, mesh.hyperbolic_area, mesh.expected_area,
                     abs(mesh.hyperbolic_area / mesh.expected_area - 1), res.eigenvalues[0],
                     res.eigenvalues[1], fem.spectral_gap(res), psi_cuff))
        if last is None:
            last = (mesh, res)
    _csv(out / "cell_convergence.csv", ["h", "nodes", "area", "expected_area", "area_rel_err",
                                         "lambda0", "lambda1", "eta", "psi0_cuff"], rows)
    fem.write_spectrum_csv(out / "cell_spectrum.csv", last[1])
    fem.write_mesh(out / "cell_mesh.json", last[0])
    oracle = hc.collar_sturm_liouville(spec.cuff_length, 0)
    orows = []
    for h in (man.mesh_h, man.mesh_h / 2, man.mesh_h / 4):
        lam = fem.solve_mesh(fem.collar_mesh(spec.cuff_length, h), ("inner", "outer"), 1).lambda0
        orows.append((h, lam, oracle, abs(lam - oracle) / oracle))
    _csv(out / "collar_oracle.csv", ["h", "fem", "oracle", "rel_err"], orows)
    if plot:
        _plot(out / "collar_oracle.svg", [r[0] for r in orows], {"relative error": [r[3] for r in orows]},
              "mesh size h", "relative error", logy=True)


def cmd_assemble(man: RunManifest, out: Path, plot: bool) -> None:
    spec = _need(man.cell, "cell").spec()
    gspec = _need(man.graph, "graph")
    radii = _need(man.radii, "radii")
    cell = ms.prepare_cell(spec, man.mesh_h)
    rows, prev = [], None
    for r in radii:
        g = gspec.build(r)
        rep, tf, lam = ms.sandwich_check(cell, g)
        if prev is not None and lam > prev + 1e-9 * max(1.0, prev):
            raise NumericalError("Dirichlet lambda0 increased with the radius")
        prev = lam
        rep.checks["test_quotient_le_proof_bound"] = tf.quotient <= tf.bound + 1e-3
        rows.append((r, lam, rep.upper_bound, rep.lower_bound, rep.mu0, rep.h_upper, tf.quotient))
        atomic_write_text(out / f"bound_report_r{r}.json", rep.to_json() + "\n")
    _csv(out / "assembly.csv", ["radius", "lambda0_dirichlet", "upper_bound", "lower_bound", "mu0",
                                "h_upper", "test_quotient"], rows)
    if plot:
        xs = [r[0] for r in rows]
        _plot(out / "convergence.svg", xs, {"lambda0 (Dirichlet)": [r[1] for r in rows],
                                             "upper bound": [r[2] for r in rows],
                                             "lower bound": [r[3] for r in rows]},
              "ball radius", "eigenvalue")


def cmd_pinch(man: RunManifest, out: Path, plot: bool) -> None:
    eps = _need(man.epsilons, "epsilons")
    v = man.cell.v if man.cell else 3
    rows = ms.pinch_sweep(eps, v=v, h=man.mesh_h, r_trunc=man.r_trunc)
    target = ms.pinch_target(v)
    _csv(out / "pinch.csv", ["eps", "lambda0", "ratio", "target"],
         [(r.eps, r.lambda0, r.ratio, target) for r in rows])
    if plot:
        _plot(out / "pinch.svg", [r.eps for r in rows],
              {"lambda0 / eps": [r.ratio for r in rows], "target": [target] * len(rows)}, "eps", "ratio")


def _mc_model(cfg: MCModel, mesh_h: float):
    if cfg.domain == "path":
        g = gs.lattice(1, 2)
        L = gs.combinatorial_laplacian(g)
        return diffusion_mc.build_walk(L, sp.identity(g.n, format="csr"), g.boundary, seed=cfg.seed)
    mesh = fem.collar_mesh(cfg.collar_length, max(mesh_h, 0.3))
    K, M = fem.assemble(mesh)
    return diffusion_mc.build_walk(K, M, mesh.loop_nodes(["inner", "outer"]), clip=True, seed=cfg.seed)


def cmd_mc(man: RunManifest, out: Path, plot: bool) -> None:
    cfg = man.mc
    model = _mc_model(cfg, man.mesh_h)
    curve = diffusion_mc.survival_curve(model, cfg.t_max, cfg.n_paths, seed=cfg.seed)
    atomic_write_text(out / "survival.csv", curve.csv())
    summary = curve.summary()
    summary["generator_lambda0"] = model.lambda0()
    atomic_write_json(out / "fit.json", summary)
    if plot:
        _plot(out / "survival.svg", curve.times, {"survival": np.maximum(curve.survival, 1e-300)},
              "t", "P(exit time > t)", logy=True)


def cmd_bounds(man: RunManifest, out: Path, plot: bool) -> None:
    spec = _need(man.cell, "cell").spec()
    l, v = spec.cuff_length, spec.v
    a3, argmin = bounds.A_tripleprime(l, return_argmin=True)
    data = {"l": l, "v": v, "m_l": hc.collar_halfwidth(l), "R2": bounds.buser_constant(2),
            "A2_at_zero": bounds.A2(v, l, 0.0) if v >= 2 else None,
            "A_tripleprime": a3, "A_tripleprime_argmin": argmin,
            "collar_energy_ratio_at_m": bounds.collar_energy_ratio(hc.collar_halfwidth(l))}
    atomic_write_json(out / "bounds.json", data)


COMMANDS = {"graph": cmd_graph, "cell": cmd_cell, "assemble": cmd_assemble,
            "pinch": cmd_pinch, "mc": cmd_mc, "bounds": cmd_bounds}


def load_manifest(path) -> RunManifest:
    text = Path(path).read_text()
    return RunManifest.model_validate(json.loads(text))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hypspec", description=__doc__)
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--manifest", required=True, help="JSON run manifest")
    p.add_argument("--out", help="output directory (overrides out_dir)")
    p.add_argument("--seed", type=int, help="Monte-Carlo seed (overrides mc.seed)")
    p.add_argument("--threads", type=int, default=1, help="worker count; results are computed serially")
    p.add_argument("--no-plot", action="store_true", help="skip SVG output")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.threads < 1:
            raise ValidationError("--threads must be at least 1")
        if not Path(args.manifest).is_file():
            raise ValidationError(f"manifest {args.manifest} not found")
        man = load_manifest(args.manifest)
        if args.seed is not None:
            man.mc.seed = args.seed
        out = Path(args.out or man.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](man, out, not args.no_plot)
    except (ValidationError, pydantic.ValidationError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())

"""
Command line driver for the heteroclinic pipeline.

Every stage reads a plain-text configuration (``key = value`` lines grouped
in ``[sections]``), consumes the files written by the previous stages in the
output directory and writes CSV files that start with a ``# config_hash=``
line. Exit codes: 0 on success, 2 on configuration errors (including missing
upstream files), 3 on numerical failures.

Stages, in order: ``expand``, ``mesh``, ``errscan``, ``section``, ``match``,
``refine``, ``grid``, plus ``report`` and ``bench-strategies``.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dynamics import CENTER_STABLE, CENTER_UNSTABLE, MU_EARTH_MOON, libration_context
from .parameterize import (
    SmallDivisorError,
    StyleConfig,
    build_parameterization,
    invariance_residual,
    load_parameterization,
    save_parameterization,
)
from .propagate import DEFAULT_RHO_MOON, DEFAULT_TMAX, IntegrationError, StopPolicy

log = logging.getLogger("heteroclinic")

TABLE2_ENERGIES = (-1.58606, -1.5855, -1.585, -1.5845, -1.5844, -1.5843, -1.5755, -1.575, -1.574)
TABLE2_CROSSINGS = ((5, 1),) * 3 + ((3, 1),) * 3 + ((1, 1),) * 3

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------------ configuration

def _floats(text):
    return tuple(float(t) for t in text.replace(",", " ").split())


def _ints(text):
    return tuple(int(t) for t in text.replace(",", " ").split())


def _pairs(text):
    out = []
    for tok in text.replace(",", " ").split():
        a, b = tok.split(":")
        out.append((int(a), int(b)))
    return tuple(out)


# (section, key) -> (attribute, parser, default)
_SCHEMA = {
    ("general", "mu"): ("mu", float, MU_EARTH_MOON),
    ("general", "order"): ("order", int, 20),
    ("general", "output_dir"): ("output_dir", str, "out"),
    ("general", "threads"): ("threads", int, 0),
    ("style", "uncouple_last"): ("uncouple_last", lambda s: s.lower() in ("1", "true", "yes"),
                                 True),
    ("style", "tau"): ("tau", float, 1e-8),
    ("slices", "energies"): ("energies", _floats, TABLE2_ENERGIES),
    ("slices", "eps"): ("eps", float, 0.05),
    ("slices", "spacing_l1"): ("spacing_l1", float, 0.0079),
    ("slices", "spacing_l2"): ("spacing_l2", float, 0.0034),
    ("slices", "n_per_axis"): ("n_per_axis", int, 0),
    ("slices", "strategy"): ("strategy", int, 4),
    ("slices", "bracket_order"): ("bracket_order", int, 4),
    ("errscan", "orders"): ("errscan_orders", _ints, (10, 15, 20)),
    ("errscan", "n_per_axis"): ("errscan_n", int, 5),
    ("errscan", "max_points"): ("errscan_max_points", int, 20),
    ("connect", "delta"): ("delta", float, 1e-3),
    ("connect", "T"): ("T", float, 3.0),
    ("connect", "xi_low"): ("xi_low", float, 1e-4),
    ("connect", "xi_high"): ("xi_high", float, 1e-3),
    ("connect", "crossings"): ("crossings", _pairs, ()),
    ("connect", "rho_moon"): ("rho_moon", float, DEFAULT_RHO_MOON),
    ("connect", "max_time"): ("max_time", float, DEFAULT_TMAX),
    ("connect", "section_direction"): ("section_direction", str, "any"),
    ("connect", "max_candidates"): ("max_candidates", int, 0),
    ("grid", "side"): ("grid_side", str, "s"),
    ("grid", "n"): ("grid_n", int, 10),
    ("tolerances", "rel_tol"): ("rel_tol", float, 1e-14),
    ("tolerances", "newton_tol"): ("newton_tol", float, 1e-10),
    ("tolerances", "residual_gate"): ("residual_gate", float, 1e-9),
    ("bench", "energy"): ("bench_energy", float, -1.5860),
    ("bench", "n_per_axis"): ("bench_n", int, 25),
    ("bench", "strategies"): ("bench_strategies", _ints, (1, 2, 3, 4)),
}

# keys feeding each stage (cumulative through the stage dependencies)
_STAGE_KEYS = {
    "expand": ["mu", "order", "uncouple_last", "tau"],
    "mesh": ["energies", "eps", "spacing_l1", "spacing_l2", "n_per_axis", "strategy",
             "bracket_order"],
    "errscan": ["errscan_orders", "errscan_n", "errscan_max_points", "delta", "T"],
    "section": ["delta", "crossings", "rho_moon", "max_time", "section_direction", "rel_tol"],
    "match": ["xi_low"],
    "refine": ["newton_tol", "max_candidates"],
    "grid": ["grid_side", "grid_n"],
    "bench": ["bench_energy", "bench_n", "bench_strategies"],
}
_STAGE_DEPS = {"expand": [], "mesh": ["expand"], "errscan": ["mesh"], "section": ["mesh"],
               "match": ["section"], "refine": ["match"], "grid": ["refine"],
               "bench": ["expand"]}


@dataclass
class PipelineConfig:
    values: dict = field(default_factory=dict)
    path: str | None = None

    def __getattr__(self, name):
        try:
            return self.__dict__["values"][name]
        except KeyError:
            raise AttributeError(name) from None

    @property
    def out(self):
        return Path(self.values["output_dir"])

    def crossing_pairs(self):
        """(l, k) per energy: unstable-branch and stable-branch crossing counts."""
        if self.crossings:
            if len(self.crossings) != len(self.energies):
                raise ConfigError("connect.crossings needs one l:k pair per energy")
            return self.crossings
        table = dict(zip(TABLE2_ENERGIES, TABLE2_CROSSINGS))
        try:
            return tuple(table[h] for h in self.energies)
        except KeyError as exc:
            raise ConfigError(f"no default crossing counts for energy {exc.args[0]}; "
                              "set connect.crossings") from None

    def stage_hash(self, stage):
        keys = []
        todo = [stage]
        while todo:
            s = todo.pop()
            keys.extend(_STAGE_KEYS[s])
            todo.extend(_STAGE_DEPS[s])
        payload = {k: self.values[k] for k in sorted(set(keys))}
        return hashlib.sha256(json.dumps(payload, sort_keys=True, default=list).encode()
                              ).hexdigest()[:16]


def load_config(path=None, overrides=()):
    """Read a configuration file; ``overrides`` are ``section.key=value`` strings."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"configuration file {path} not found")
        try:
            parser.read(path)
        except configparser.Error as exc:
            raise ConfigError(str(exc)) from None
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        lhs, value = item.split("=", 1)
        sec, key = lhs.strip().split(".", 1)
        if not parser.has_section(sec):
            parser.add_section(sec)
        parser.set(sec, key, value.strip())
    values = {attr: default for (_, _), (attr, _, default) in _SCHEMA.items()}
    for sec in parser.sections():
        for key, raw in parser.items(sec):
            spec = _SCHEMA.get((sec, key))
            if spec is None:
                raise ConfigError(f"unknown configuration key {sec}.{key}")
            attr, conv, _ = spec
            try:
                values[attr] = conv(raw)
            except (TypeError, ValueError):
                raise ConfigError(f"bad value for {sec}.{key}: {raw!r}") from None
    cfg = PipelineConfig(values, str(path) if path else None)
    _validate(cfg)
    return cfg


def _validate(cfg):
    v = cfg.values
    if v["order"] < 2:
        raise ConfigError("general.order must be at least 2")
    if not 0 < v["mu"] < 0.5:
        raise ConfigError("general.mu must lie in (0, 1/2)")
    for k in ("tau", "eps", "spacing_l1", "spacing_l2", "delta", "T", "xi_low", "xi_high",
              "rho_moon", "max_time", "rel_tol", "newton_tol", "residual_gate"):
        if not v[k] > 0:
            raise ConfigError(f"{k} must be positive")
    if v["strategy"] not in (1, 2, 3, 4):
        raise ConfigError("slices.strategy must be 1, 2, 3 or 4")
    if v["section_direction"] not in ("any", "increasing", "decreasing"):
        raise ConfigError("connect.section_direction must be any, increasing or decreasing")
    if v["grid_side"] not in ("u", "s"):
        raise ConfigError("grid.side must be u or s")
    if any(N < 1 or N > v["order"] for N in v["errscan_orders"]):
        raise ConfigError("errscan.orders must lie between 1 and general.order")
    if not v["energies"]:
        raise ConfigError("slices.energies is empty")
    for j in (1, 2):
        h0 = libration_context(j, mu=v["mu"]).h0
        low = [h for h in v["energies"] if not h > h0]
        if low:
            raise ConfigError(f"energies {low} are not above h0(L{j}) = {h0:.10f}")
    if v["threads"] > 0:
        os.environ.setdefault("NUMBA_NUM_THREADS", str(v["threads"]))


# ------------------------------------------------------------------ file helpers

def _header(cfg, stage, extra=()):
    return [f"config_hash={cfg.stage_hash(stage)}", f"stage={stage}"] + list(extra)


def _check_hash(path, cfg, stage):
    if not path.is_file():
        raise ConfigError(f"missing {path}: run the '{stage}' stage first")
    with open(path) as fh:
        first = fh.readline().strip()
    want = f"# config_hash={cfg.stage_hash(stage)}"
    if first != want:
        raise ConfigError(f"{path} was produced with a different configuration "
                          f"({first[2:] or 'no hash'}); rerun the '{stage}' stage")


def _write_rows(path, header_lines, columns, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        w = csv.writer(fh)
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(x) for x in r])


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def _energy_tag(i):
    return f"h{i + 1}"


def _expansion_dir(cfg, j):
    kind = "cs" if j == 1 else "cu"
    return cfg.out / "expansions" / f"{kind}-L{j}-N{cfg.order}"


def _style(cfg):
    return StyleConfig(uncouple_last=cfg.uncouple_last, tau=cfg.tau)


def load_expansions(cfg):
    """(cu(L2), cs(L1)) parameterizations written by ``expand``."""
    out = []
    for j in (2, 1):
        d = _expansion_dir(cfg, j)
        marker = d / "stage.txt"
        if not marker.is_file():
            raise ConfigError(f"missing expansion {d}: run 'expand' first")
        if marker.read_text().strip() != f"config_hash={cfg.stage_hash('expand')}":
            raise ConfigError(f"{d} was built with a different configuration; rerun 'expand'")
        out.append(load_parameterization(d))
    return tuple(out)


def residual_gate(p, rho=1e-2, ndir=20, seed=0):
    """Invariance residual at radius ``rho`` and its halving ratio.

    Returns ``(E(rho), E(rho/2) / E(rho))`` with ``E`` the maximum residual
    over random directions. A healthy order-``N`` expansion has ratio close
    to ``2**-(N+1)`` until ``E`` reaches roundoff.
    """
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(ndir, 5))
    U /= np.linalg.norm(U, axis=1)[:, None]

    def E(r):
        return max(float(np.linalg.norm(invariance_residual(p, p.ctx.C @ (r * u)))) for u in U)
    e1 = E(rho)
    return e1, E(rho / 2) / e1 if e1 > 0 else 0.0


# ------------------------------------------------------------------ stages

def cmd_expand(cfg):
    """Build and store cu(L2) and cs(L1); a matching manifest makes this a no-op."""
    results = {}
    for j, kind in ((2, CENTER_UNSTABLE), (1, CENTER_STABLE)):
        d = _expansion_dir(cfg, j)
        marker = d / "stage.txt"
        tag = f"config_hash={cfg.stage_hash('expand')}"
        if marker.is_file() and marker.read_text().strip() == tag:
            log.info("expansion L%d order %d: cache hit", j, cfg.order)
            results[j] = "cached"
            continue
        ctx = libration_context(j, kind, mu=cfg.mu)
        t0 = time.perf_counter()
        p = build_parameterization(ctx, cfg.order, _style(cfg))
        gate, ratio = residual_gate(p)
        if gate > cfg.residual_gate and ratio > 2.0 ** -cfg.order:
            raise ArithmeticError(f"invariance residual {gate:.3e} at |s| = 1e-2 exceeds the "
                                  f"gate {cfg.residual_gate:.1e} and its halving ratio "
                                  f"{ratio:.3e} is not of order {cfg.order}")
        save_parameterization(p, d)
        marker.write_text(tag + "\n")
        log.info("expansion L%d order %d built in %.1fs (residual %.2e)", j, cfg.order,
                 time.perf_counter() - t0, gate)
        results[j] = "built"
    return results


def cmd_mesh(cfg):
    from .slicing import mesh_slice
    pu, ps = load_expansions(cfg)
    rows = []
    for i, h in enumerate(cfg.energies):
        for j, p, sp in ((1, ps, cfg.spacing_l1), (2, pu, cfg.spacing_l2)):
            kw = ({"n_per_axis": cfg.n_per_axis} if cfg.n_per_axis > 0 else {"spacing": sp})
            m = mesh_slice(h, p, eps=cfg.eps, strategy=cfg.strategy,
                           bracket_order=cfg.bracket_order, **kw)
            path = cfg.out / "mesh" / f"L{j}_{_energy_tag(i)}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            m.write_csv(path, _header(cfg, "mesh", [f"h={h:.17g}", f"j={j}",
                                                   f"seconds={m.stats['seconds']:.3f}"]))
            rows.append((h, j, len(m), m.stats["seconds"]))
            log.info("mesh h=%g L%d: %d points (%.1fs)", h, j, len(m), m.stats["seconds"])
    return rows


def _load_mesh(cfg, i, j):
    from .slicing import SliceMesh
    path = cfg.out / "mesh" / f"L{j}_{_energy_tag(i)}.csv"
    _check_hash(path, cfg, "mesh")
    m = SliceMesh.read_csv(path, j)
    m.h = cfg.energies[i]
    return m


def cmd_errscan(cfg):
    from .slicing import error_scan
    pu, ps = load_expansions(cfg)
    all_rows = []
    for j, p in ((1, ps), (2, pu)):
        rows = error_scan(p, cfg.energies, cfg.errscan_orders, delta=cfg.delta, T=cfg.T,
                          n_per_axis=cfg.errscan_n, eps=cfg.eps,
                          max_points=cfg.errscan_max_points or None)
        path = cfg.out / f"errscan_L{j}.csv"
        _write_rows(path, _header(cfg, "errscan", [f"j={j}"]), ["h", "order", "max_e_O"],
                    [(r["h"], r["order"], r["max_e_O"]) for r in rows])
        all_rows.extend((j, r["h"], r["order"], r["max_e_O"]) for r in rows)
    return all_rows


def cmd_section(cfg):
    from .connect import branch_deltas, propagate_cloud
    pu, ps = load_expansions(cfg)
    du, ds = branch_deltas(pu, ps, cfg.delta)
    stop = StopPolicy(cfg.rho_moon, cfg.max_time)
    out = []
    for i, (h, (l, k)) in enumerate(zip(cfg.energies, cfg.crossing_pairs())):
        for j, p, d, n in ((2, pu, du, l), (1, ps, ds, k)):
            mesh = _load_mesh(cfg, i, j)
            t0 = time.perf_counter()
            cloud = propagate_cloud(mesh, p, d, n, stop=stop,
                                    section_direction=cfg.section_direction,
                                    rel_tol=cfg.rel_tol)
            cloud.h = h
            kind = "u" if j == 2 else "s"
            path = cfg.out / "section" / f"cloud_{kind}_{_energy_tag(i)}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            cloud.write_csv(path, _header(cfg, "section", [f"dropped={len(cloud.dropped)}",
                                                          f"seconds={time.perf_counter() - t0:.3f}"]))
            out.append((h, kind, len(cloud), len(cloud.dropped)))
    return out


def _load_cloud(cfg, i, kind):
    from .connect import SectionCloud
    path = cfg.out / "section" / f"cloud_{kind}_{_energy_tag(i)}.csv"
    _check_hash(path, cfg, "section")
    return SectionCloud.read_csv(path)


def cmd_match(cfg):
    from .connect import match_candidates
    out = []
    for i, h in enumerate(cfg.energies):
        cs, cu = _load_cloud(cfg, i, "s"), _load_cloud(cfg, i, "u")
        if len(cs) == 0 or len(cu) == 0:
            pairs, field_ = [], np.zeros((0, 5))
        else:
            pairs, field_ = match_candidates(cs, cu, cfg.xi_low)
        tag = _energy_tag(i)
        _write_rows(cfg.out / "match" / f"candidates_{tag}.csv",
                    _header(cfg, "match", [f"h={h:.17g}"]),
                    ["s1s", "s2s", "s3s", "s4s", "s1u", "s2u", "s3u", "s4u", "d", "Ts", "Tu"],
                    [tuple(c.s_hat_s) + tuple(c.s_hat_u) + (c.d, c.T_s, c.T_u) for c in pairs])
        _write_rows(cfg.out / "match" / f"heatmap_{tag}.csv", _header(cfg, "match"),
                    ["s1", "s2", "s4", "d"], [(r[0], r[1], r[3], r[4]) for r in field_])
        out.append((h, len(pairs)))
    return out


def _load_candidates(cfg, i):
    from .connect import CandidatePair
    path = cfg.out / "match" / f"candidates_{_energy_tag(i)}.csv"
    _check_hash(path, cfg, "match")
    if _count_rows(path) <= 0:
        return []
    rows = np.loadtxt(path, delimiter=",", skiprows=_hdr(path), ndmin=2).reshape(-1, 11)
    return [CandidatePair(r[:4].copy(), r[4:8].copy(), float(r[8]), float(r[9]), float(r[10]))
            for r in rows]


def cmd_refine(cfg):
    from .connect import branch_deltas, diagnostics, refine_candidates, write_connections
    pu, ps = load_expansions(cfg)
    du, ds = branch_deltas(pu, ps, cfg.delta)
    out = []
    for i, h in enumerate(cfg.energies):
        pairs = _load_candidates(cfg, i)
        if cfg.max_candidates > 0:
            pairs = pairs[:cfg.max_candidates]
        t0 = time.perf_counter()
        recs, fails = refine_candidates(pairs, pu, ps, h, du, ds, tol=cfg.newton_tol)
        for r in recs:
            diagnostics(r, pu, ps)
        dt = time.perf_counter() - t0
        _mk(cfg.out / "refine")
        write_connections(recs, cfg.out / "refine" / f"connections_{_energy_tag(i)}.csv",
                          _header(cfg, "refine", [f"h={h:.17g}", f"candidates={len(pairs)}",
                                                  f"failures={len(fails)}",
                                                  f"seconds={dt:.3f}"]))
        out.append((h, len(pairs), len(recs), len(fails)))
    return out


def _mk(d):
    d.mkdir(parents=True, exist_ok=True)


def _load_records(cfg, i, pu, ps):
    # rebuild full records from the connection table by re-running Newton from each row
    from .connect import CandidatePair, branch_deltas, read_connection_table, refine_candidate
    path = cfg.out / "refine" / f"connections_{_energy_tag(i)}.csv"
    _check_hash(path, cfg, "refine")
    tab = read_connection_table(path)
    du, ds = branch_deltas(pu, ps, cfg.delta)
    recs = []
    for n in range(len(tab["h"])):
        pair = CandidatePair(np.array([tab[f"s{c}s"][n] for c in "1234"]),
                             np.array([tab[f"s{c}u"][n] for c in "1234"]), 0.0,
                             float(tab["Ts"][n]), float(tab["Tu"][n]))
        recs.append(refine_candidate(pair, pu, ps, cfg.energies[i], du, ds, tol=cfg.newton_tol))
    return recs


def cmd_grid(cfg):
    from .connect import diagnostics, grid_refine, write_connections
    pu, ps = load_expansions(cfg)
    out = []
    for i, h in enumerate(cfg.energies):
        recs = _load_records(cfg, i, pu, ps)
        grid, fails = grid_refine(recs, pu, ps, h, side=cfg.grid_side, n=cfg.grid_n,
                                  tol=cfg.newton_tol)
        for r in grid:
            diagnostics(r, pu, ps)
        _mk(cfg.out / "grid")
        write_connections(grid, cfg.out / "grid" / f"grid_{_energy_tag(i)}.csv",
                          _header(cfg, "grid", [f"h={h:.17g}", f"failures={len(fails)}"]))
        out.append((h, len(grid), len(fails)))
    return out


def _read_meta(path):
    meta = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("#"):
                break
            for tok in line[1:].split():
                if "=" in tok:
                    k, v = tok.split("=", 1)
                    meta[k] = v
    return meta


def _count_rows(path):
    with open(path) as fh:
        return sum(1 for line in fh if line.strip() and not line.startswith("#")) - 1


def cmd_report(output_dir):
    """Summary table of whatever stage files exist under ``output_dir``."""
    out = Path(output_dir)
    lines = []
    tags = sorted({p.stem.split("_")[-1] for p in out.glob("*/*_h*.csv")},
                  key=lambda t: int(t[1:]))
    if tags:
        lines.append(f"{'slice':>6} {'mesh L1':>8} {'mesh L2':>8} {'cloud s':>8} {'cloud u':>8} "
                     f"{'cand':>6} {'conn':>6} {'planar':>6} {'dmin':>10} {'zmax':>10} "
                     f"{'t_mesh':>8} {'t_sec':>8} {'t_ref':>8}")
    for tag in tags:
        def count(rel):
            p = out / rel
            return _count_rows(p) if p.is_file() else None

        def secs(*rels):
            tot, seen = 0.0, False
            for rel in rels:
                p = out / rel
                if p.is_file() and "seconds" in _read_meta(p):
                    tot += float(_read_meta(p)["seconds"])
                    seen = True
            return tot if seen else None
        conn = out / "refine" / f"connections_{tag}.csv"
        planar = dmin = zmax = None
        if conn.is_file() and _count_rows(conn) > 0:
            tab = np.loadtxt(conn, delimiter=",", comments="#", skiprows=_hdr(conn), ndmin=2)
            planar = int(np.sum((np.abs(tab[:, [2, 3, 6, 7]]) < 1e-12).all(axis=1)))
            dmin, zmax = float(tab[:, 12].min()), float(tab[:, 13].max())
        vals = [count(f"mesh/L1_{tag}.csv"), count(f"mesh/L2_{tag}.csv"),
                count(f"section/cloud_s_{tag}.csv"), count(f"section/cloud_u_{tag}.csv"),
                count(f"match/candidates_{tag}.csv"), count(f"refine/connections_{tag}.csv"),
                planar]
        times = [secs(f"mesh/L1_{tag}.csv", f"mesh/L2_{tag}.csv"),
                 secs(f"section/cloud_s_{tag}.csv", f"section/cloud_u_{tag}.csv"),
                 secs(f"refine/connections_{tag}.csv")]
        lines.append(f"{tag:>6} " + " ".join(f"{'-' if v is None else v:>8}" for v in vals[:4])
                     + " " + " ".join(f"{'-' if v is None else v:>6}" for v in vals[4:])
                     + f" {_num(dmin):>10} {_num(zmax):>10} "
                     + " ".join(f"{_num(t, '.1f'):>8}" for t in times))
    bench = out / "bench_strategies.csv"
    if bench.is_file():
        rows = np.loadtxt(bench, delimiter=",", comments="#", skiprows=_hdr(bench), ndmin=2)
        lines.append("")
        lines.append("strategy  seconds  points  columns")
        for r in rows:
            lines.append(f"{int(r[0]):>8} {r[1]:>8.2f} {int(r[2]):>7} {int(r[3]):>8}")
    for j in (1, 2):
        p = out / f"errscan_L{j}.csv"
        if p.is_file():
            rows = np.loadtxt(p, delimiter=",", comments="#", skiprows=_hdr(p), ndmin=2)
            lines.append("")
            lines.append(f"error in the orbit, L{j}: h, order, max e_O")
            for r in rows:
                lines.append(f"  {r[0]:.5f} {int(r[1]):>3} {r[2]:.3e}")
    text = "\n".join(lines) + ("\n" if lines else "")
    if out.is_dir():
        (out / "report.txt").write_text(text)
    return text


def _hdr(path):
    n = 0
    with open(path) as fh:
        for line in fh:
            n += 1
            if not line.startswith("#"):
                return n
    return n


def _num(v, fmt=".3e"):
    return "-" if v is None else format(v, fmt)


def cmd_bench_strategies(cfg):
    from .slicing import mesh_slice
    _, ps = load_expansions(cfg)
    rows, meshes = [], {}
    for st in cfg.bench_strategies:
        m = mesh_slice(cfg.bench_energy, ps, n_per_axis=cfg.bench_n, eps=cfg.eps, strategy=st,
                       bracket_order=cfg.bracket_order)
        meshes[st] = m
        rows.append((st, m.stats["seconds"], len(m), m.stats["columns"]))
        log.info("strategy %d: %.2fs, %d points", st, m.stats["seconds"], len(m))
    _write_rows(cfg.out / "bench_strategies.csv",
                _header(cfg, "bench", [f"h={cfg.bench_energy:.17g}", f"n={cfg.bench_n}"]),
                ["strategy", "seconds", "points", "columns"], rows)
    return rows


# ------------------------------------------------------------------ entry point

def build_parser():
    ap = argparse.ArgumentParser(prog="heteroclinic", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for name, helptext in (("expand", "build the cu(L2) and cs(L1) expansions"),
                           ("mesh", "mesh the iso-energetic slices"),
                           ("errscan", "error in the orbit per energy and order"),
                           ("section", "propagate slice meshes to the Poincare section"),
                           ("match", "candidate pairs and distance field"),
                           ("refine", "refine candidates with the shooting system"),
                           ("grid", "equally spaced connections with s1, s4 pinned"),
                           ("bench-strategies", "time the four meshing strategies"),
                           ("report", "summary of the output directory")):
        sp = sub.add_parser(name, help=helptext)
        sp.add_argument("-c", "--config", help="configuration file")
        sp.add_argument("-s", "--set", action="append", default=[], metavar="SEC.KEY=VALUE",
                        help="override a configuration value")
        if name == "report":
            sp.add_argument("output_dir", nargs="?", help="output directory")
    return ap


_COMMANDS = {"expand": cmd_expand, "mesh": cmd_mesh, "errscan": cmd_errscan,
             "section": cmd_section, "match": cmd_match, "refine": cmd_refine, "grid": cmd_grid,
             "bench-strategies": cmd_bench_strategies}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            outdir = args.output_dir
            if outdir is None:
                outdir = load_config(args.config, args.set).output_dir
            print(cmd_report(outdir), end="")
            return EXIT_OK
        cfg = load_config(args.config, args.set)
        result = _COMMANDS[args.command](cfg)
        if isinstance(result, list):
            for row in result:
                print(" ".join(_fmt(x) for x in row))
        elif isinstance(result, dict):
            for k, v in result.items():
                print(f"L{k}: {v}")
        return EXIT_OK
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SmallDivisorError, IntegrationError, ArithmeticError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())

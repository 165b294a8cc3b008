"""Pipeline orchestration and benchmark reports."""

from __future__ import annotations

import csv
import io as _io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import flow, phantom, swd
from .io import load_volume, save_volume
from .volume import ScalarVolume, rmsd, sample_points

log = logging.getLogger(__name__)

REPORT_HEADER = ["case_id", "warp_kind", "rmsd_before", "rmsd_after", "shells", "steps", "wall_seconds"]
RESULT_SUFFIX = ".result.json"
WARP_SUFFIX = ".warp.json"

_FLOW_KEYS = {f.name for f in fields(flow.RegistrationConfig)} - {"regularizer"}
_ESP_KEYS = {f.name for f in fields(flow.EspSpec)}


@dataclass
class PipelineConfig:
    preconditioning: str = "none"          # none | swd-similarity
    resample: str = "trilinear"            # trilinear | swd, used when geometries differ
    esp: flow.EspSpec | None = field(default_factory=flow.EspSpec)
    flow: flow.RegistrationConfig = field(default_factory=lambda: flow.RegistrationConfig(levels=3))
    swd_order: int = 16
    output_dir: str = "."
    report_format: str = "csv"             # csv | markdown

    def validate(self) -> "PipelineConfig":
        if self.preconditioning not in ("none", "swd-similarity"):
            raise ValueError(f"unknown preconditioning {self.preconditioning!r}")
        if self.resample not in ("trilinear", "swd"):
            raise ValueError(f"unknown resampling {self.resample!r}")
        if self.report_format not in ("csv", "markdown"):
            raise ValueError(f"unknown report format {self.report_format!r}")
        if self.esp is not None and self.esp.kind not in ("adjacency", "image-weighted", "gaussian-stationary"):
            raise ValueError(f"unknown ESP coupling {self.esp.kind!r}")
        if self.swd_order < 1:
            raise ValueError("swd_order must be >= 1")
        self.flow.validate()
        return self

    def registration_config(self) -> flow.RegistrationConfig:
        cfg = flow.RegistrationConfig(**{k: getattr(self.flow, k) for k in _FLOW_KEYS})
        cfg.regularizer = self.esp
        return cfg

    def to_dict(self) -> dict:
        return {
            "preconditioning": self.preconditioning,
            "resample": self.resample,
            "esp": None if self.esp is None else asdict(self.esp),
            "flow": {k: getattr(self.flow, k) for k in sorted(_FLOW_KEYS)},
            "swd_order": self.swd_order,
            "output_dir": self.output_dir,
            "report_format": self.report_format,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        unknown = set(d) - {"preconditioning", "resample", "esp", "flow", "swd_order", "output_dir",
                            "report_format", "preset"}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        base = preset(d["preset"]) if "preset" in d else cls()
        if "esp" in d:
            e = d["esp"]
            if e is None:
                base.esp = None
            else:
                bad = set(e) - _ESP_KEYS
                if bad:
                    raise ValueError(f"unknown esp keys: {sorted(bad)}")
                base.esp = flow.EspSpec(**{**asdict(base.esp or flow.EspSpec()), **e})
        if "flow" in d:
            bad = set(d["flow"]) - _FLOW_KEYS
            if bad:
                raise ValueError(f"unknown flow keys: {sorted(bad)}")
            for k, v in d["flow"].items():
                setattr(base.flow, k, v)
        for k in ("preconditioning", "resample", "swd_order", "output_dir", "report_format"):
            if k in d:
                setattr(base, k, d[k])
        return base.validate()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def preset(name: str) -> PipelineConfig:
    """Named configurations used by the benchmark runs."""
    if name == "default":
        return PipelineConfig()
    if name == "c-sphere":
        # adjacency coupling, no preconditioning; the smoothed velocity form
        # of the coordinate equation carries the large topological move
        return PipelineConfig(esp=flow.EspSpec("adjacency"),
                              flow=flow.RegistrationConfig(levels=3, max_shells=150, nonlocal_position=True))
    if name == "panel":
        return PipelineConfig(esp=flow.EspSpec("adjacency"),
                              flow=flow.RegistrationConfig(levels=3, max_shells=15))
    raise ValueError(f"unknown preset {name!r}")


# ---------------------------------------------------------------------------
# one registration


@dataclass
class RegisterResult:
    case_id: str
    warp_kind: str
    rmsd_before: float
    rmsd_after: float
    shells: int
    steps: int
    wall_seconds: float
    map: flow.DeformationMap = field(repr=False)
    warped: ScalarVolume = field(repr=False)
    diagnostics: list = field(repr=False, default_factory=list)
    prealign: swd.SimilarityParams | None = None
    fold_fraction: float = 0.0

    def row(self) -> dict:
        return {"case_id": self.case_id, "warp_kind": self.warp_kind, "rmsd_before": self.rmsd_before,
                "rmsd_after": self.rmsd_after, "shells": self.shells, "steps": self.steps,
                "wall_seconds": self.wall_seconds}


def invert_similarity(p: swd.SimilarityParams) -> swd.SimilarityParams:
    c = np.asarray(p.center) + np.asarray(p.translation)
    return swd.SimilarityParams(1.0 / p.s_r, -p.theta_r, -p.psi_r, tuple(c), tuple(-np.asarray(p.translation)),
                                -p.phi_r)


def to_fixed_grid(fixed: ScalarVolume, moving: ScalarVolume, method: str = "trilinear", order: int = 16) -> ScalarVolume:
    if moving.geometry.same_as(fixed.geometry):
        return moving
    if method == "swd":
        b = swd.build_basis(swd.default_radius(moving.geometry), order, order)
        c = swd.forward_swd(moving, b)
        return ScalarVolume(fixed.geometry, swd.synthesize_points(c, fixed.geometry.grid()))
    return ScalarVolume(fixed.geometry, sample_points(moving, fixed.geometry.grid()))


def prealign(fixed: ScalarVolume, moving: ScalarVolume, order: int = 16):
    """Similarity taking ``moving`` onto ``fixed``, and the resampled moving volume."""
    b = swd.build_basis(swd.default_radius(fixed.geometry), order, order)
    c0 = swd.forward_swd(fixed, b, swd.intensity_centroid(fixed))
    c1 = swd.forward_swd(moving, b, swd.intensity_centroid(moving))
    p = swd.estimate_similarity(c0, c1)     # fixed -> moving
    back = invert_similarity(p)
    return back, swd.apply_similarity(moving, back, fixed.geometry, method="trilinear")


def register_pair(fixed: ScalarVolume, moving: ScalarVolume, cfg: PipelineConfig | None = None,
                  case_id: str = "case", warp_kind: str = "none", on_step=None) -> RegisterResult:
    cfg = (cfg or PipelineConfig()).validate()
    moving = to_fixed_grid(fixed, moving, cfg.resample, cfg.swd_order)
    before = rmsd(fixed, moving)
    params = None
    if cfg.preconditioning == "swd-similarity":
        params, moving = prealign(fixed, moving, cfg.swd_order)
    t0 = time.perf_counter()
    dmap, diags = flow.register(fixed, moving, cfg.registration_config(), return_diagnostics=True,
                                  on_step=on_step)
    wall = time.perf_counter() - t0
    warped = flow.warp_volume(moving, dmap)
    return RegisterResult(case_id, warp_kind, before, rmsd(fixed, warped), len(dmap.shells),
                          sum(s.steps for s in dmap.shells), round(wall, 1), dmap, warped, diags, params,
                          flow.fold_fraction(dmap))


def write_outputs(res: RegisterResult, prefix, cfg: PipelineConfig, fmt: str = "nifti1") -> dict:
    """Map file, warped volume, shell CSV and a result JSON next to ``prefix``."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if fmt == "nifti1" else ".vol"
    paths = {"map": f"{prefix}.map", "warped": f"{prefix}_warped{ext}", "shells": f"{prefix}_shells.csv",
             "result": f"{prefix}{RESULT_SUFFIX}"}
    flow.save_map(res.map, paths["map"])
    save_volume(res.warped, paths["warped"], fmt)
    Path(paths["shells"]).write_text(flow.diagnostics_csv(res.diagnostics))
    doc = {**res.row(), "ratio": res.rmsd_after / res.rmsd_before if res.rmsd_before > 0 else 0.0,
           "fold_fraction": res.fold_fraction, "config": cfg.to_dict(),
           "prealign": None if res.prealign is None else asdict(res.prealign)}
    Path(paths["result"]).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return paths


# ---------------------------------------------------------------------------
# panel


def make_panel(volume: ScalarVolume, out_dir, case_id: str, seed: int = 0, fmt: str = "nifti1",
               amplitude_scale: float = 1.0) -> list[tuple[Path, Path]]:
    """Write the five warped members with their ground-truth descriptors."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if fmt == "nifti1" else ".vol"
    seeds = [seed * 10 + i for i in range(len(phantom.WARP_KINDS))]
    written = []
    for warped, w in phantom.generate_panel(volume, seeds, amplitude_scale):
        vol_path = out / f"{case_id}_{w.kind}{ext}"
        desc_path = out / f"{case_id}_{w.kind}{WARP_SUFFIX}"
        save_volume(warped, vol_path, fmt)
        desc_path.write_text(w.to_json() + "\n")
        written.append((vol_path, desc_path))
    return written


def run_panel(volume: ScalarVolume, out_dir, case_id: str, cfg: PipelineConfig, seed: int = 0,
              fmt: str = "nifti1") -> list[RegisterResult]:
    """Generate the panel and register every member back onto the original."""
    results = []
    for vol_path, desc_path in make_panel(volume, out_dir, case_id, seed, fmt):
        w = phantom.AnalyticWarp.from_json(desc_path.read_text())
        moving = load_volume(vol_path)
        res = register_pair(volume, moving, cfg, case_id, w.kind)
        write_outputs(res, Path(out_dir) / f"{case_id}_{w.kind}", cfg, fmt)
        log.info("%s %s: rmsd %.4g -> %.4g (%d shells, %.1f s)", case_id, w.kind, res.rmsd_before,
                 res.rmsd_after, res.shells, res.wall_seconds)
        results.append(res)
    return results


# ---------------------------------------------------------------------------
# reports


@dataclass
class RunReport:
    rows: list[dict]
    warnings: list[str] = field(default_factory=list)

    def _mean(self, rows, key):
        return float(np.mean([r[key] for r in rows]))

    def _group(self, key):
        groups: dict[str, list] = {}
        for r in self.rows:
            groups.setdefault(r[key], []).append(r)
        return dict(sorted(groups.items()))

    def aggregates(self, key: str) -> list[dict]:
        out = []
        for name, rows in self._group(key).items():
            before = self._mean(rows, "rmsd_before")
            after = self._mean(rows, "rmsd_after")
            out.append({key: name, "n": len(rows), "rmsd_before": before, "rmsd_after": after,
                        "ratio": after / before if before > 0 else 0.0,
                        "wall_seconds": self._mean(rows, "wall_seconds")})
        return out

    def violations(self) -> list[str]:
        return [f"{r['case_id']}/{r['warp_kind']}" for r in self.rows if r["rmsd_after"] > r["rmsd_before"]]

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in self.rows:
            w.writerow([r["case_id"], r["warp_kind"], _num(r["rmsd_before"]), _num(r["rmsd_after"]),
                        r["shells"], r["steps"], f"{r['wall_seconds']:.1f}"])
        for key in ("warp_kind", "case_id"):
            buf.write(f"\n# mean by {key}\n")
            w.writerow([key, "n", "rmsd_before", "rmsd_after", "ratio", "wall_seconds"])
            for a in self.aggregates(key):
                w.writerow([a[key], a["n"], _num(a["rmsd_before"]), _num(a["rmsd_after"]), _num(a["ratio"]),
                            _num(a['wall_seconds'])])
        if self.rows:
            buf.write(f"\n# mean wall_seconds,{_num(self._mean(self.rows, 'wall_seconds'))}\n")
        for v in self.violations():
            buf.write(f"# flagged: rmsd_after > rmsd_before for {v}\n")
        for msg in self.warnings:
            buf.write(f"# warning: {msg}\n")
        return buf.getvalue()

    def to_markdown(self) -> str:
        lines = ["| " + " | ".join(REPORT_HEADER) + " |", "|" + "---|" * len(REPORT_HEADER)]
        for r in self.rows:
            lines.append(f"| {r['case_id']} | {r['warp_kind']} | {_num(r['rmsd_before'])} | {_num(r['rmsd_after'])} "
                         f"| {r['shells']} | {r['steps']} | {r['wall_seconds']:.1f} |")
        for key in ("warp_kind", "case_id"):
            lines += ["", f"Mean by {key}", "", f"| {key} | n | rmsd_before | rmsd_after | ratio | wall_seconds |",
                      "|---|---|---|---|---|---|"]
            for a in self.aggregates(key):
                lines.append(f"| {a[key]} | {a['n']} | {_num(a['rmsd_before'])} | {_num(a['rmsd_after'])} "
                             f"| {_num(a['ratio'])} | {_num(a['wall_seconds'])} |")
        for v in self.violations():
            lines.append(f"\nFlagged: rmsd_after > rmsd_before for {v}")
        for msg in self.warnings:
            lines.append(f"\nWarning: {msg}")
        return "\n".join(lines) + "\n"

    def render(self, fmt: str = "csv") -> str:
        return self.to_markdown() if fmt == "markdown" else self.to_csv()


def _num(x: float) -> str:
    return f"{x:.10g}"


def collect_report(directory) -> RunReport:
    """Rows from every ``*.result.json`` in ``directory``, sorted by (case, kind).

    Panel members whose ground-truth descriptor is missing are skipped
    with a warning.
    """
    d = Path(directory)
    rows, warnings = [], []
    for path in sorted(d.glob(f"*{RESULT_SUFFIX}")):
        doc = json.loads(path.read_text())
        stem = path.name[:-len(RESULT_SUFFIX)]
        if doc.get("warp_kind") in phantom.WARP_KINDS and not (d / f"{stem}{WARP_SUFFIX}").exists():
            warnings.append(f"{stem}: missing ground truth descriptor, case skipped")
            continue
        missing = [k for k in REPORT_HEADER if k not in doc]
        if missing:
            warnings.append(f"{stem}: result lacks {', '.join(missing)}, case skipped")
            continue
        rows.append({k: doc[k] for k in REPORT_HEADER})
    rows.sort(key=lambda r: (r["case_id"], r["warp_kind"]))
    return RunReport(rows, warnings)

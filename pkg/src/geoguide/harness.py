"""Run configuration, single runs, ablation grids and trace aggregation."""

import csv
import dataclasses
import functools
import io
import json
import math
import subprocess
import warnings
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .alignment import plan_alignment
from .decoder import GATING_MODES
from .encoder import ScheduleError, sample_layers
from .estimator import GuideClassifier, NonFiniteLossError
from .serialize import save_tensors
from .tasks import FAMILIES, default_scene_config, make_task_batch, question_for

TRAINABLE_GROUPS = ("projectors", "gates", "decoder", "macro", "embeddings")
TRACE_FIELDS = ("step", "loss", "train_acc", "eval_acc", "lr", "gate_open", "gate_open_mean",
                "task", "m", "gating", "seed")


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"{key}: {message}")
        self.key = key


class SchemaError(ValueError):
    def __init__(self, path, field, message):
        super().__init__(f"{path}: field {field!r} {message}")
        self.field = field


@dataclass
class RunConfig:
    """Every knob of a run as one flat record."""

    task: str = "nearer_of_two"
    K: int = 24
    m: int = 6
    P_v: int = 8
    P_g: int = 14
    H: int = 64
    W: int = 64
    N: int = 2
    C_geo: int = 16
    C_llm: int = 32
    L_dec: int = 10
    heads: int = 4
    ffn: int = 64
    gating: str = "sem+glo"
    gate_granularity: str = "channel"
    steps: int = 2000
    batch: int = 32
    peak_lr: float = 3e-4
    warmup_ratio: float = 0.03
    init_alpha: float = 0.0
    trainable: str = "macro,projectors,gates,decoder"
    seed: int = 0
    data_seed: int = 0
    train_size: int = 2048
    eval_size: int = 512
    eval_every: int = 200
    out: str = "runs/run"

    # ---------------------------------------------------------- loading

    @classmethod
    def from_dict(cls, d):
        known = {f.name: f for f in fields(cls)}
        kw = {}
        for key, value in d.items():
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
            kw[key] = _coerce(key, value, known[key].type)
        return cls(**kw)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as err:
            raise ConfigError("config", f"cannot read {path}: {err}") from None
        if not isinstance(data, dict):
            raise ConfigError("config", f"{path} must hold a flat JSON object")
        return cls.from_dict(data)

    def to_dict(self):
        return dataclasses.asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def replace(self, **kw):
        return self.from_dict({**self.to_dict(), **kw})

    # ------------------------------------------------------- validation

    def trainable_groups(self):
        return tuple(g for g in self.trainable.split(",") if g)

    def scene_config(self):
        base = default_scene_config(self.task)
        return dataclasses.replace(base, N=self.N, H=self.H, W=self.W)

    def validate(self):
        """Check module preconditions; raises :class:`ConfigError` naming the key."""
        if self.task not in FAMILIES:
            raise ConfigError("task", f"must be one of {FAMILIES}, got {self.task!r}")
        for key in ("K", "P_v", "P_g", "N", "C_geo", "C_llm", "L_dec", "heads", "ffn", "steps",
                    "batch", "train_size", "eval_size", "eval_every"):
            if getattr(self, key) < 1:
                raise ConfigError(key, f"must be >= 1, got {getattr(self, key)}")
        if self.K < 8:
            raise ConfigError("K", f"must be >= 8, got {self.K}")
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                sample_layers(self.K, self.m) if self.m >= 0 else None
        except ScheduleError as err:
            raise ConfigError("m", str(err)) from None
        if self.m < 0 or self.m > self.L_dec:
            raise ConfigError("m", f"must lie in 0..L_dec={self.L_dec}, got {self.m}")
        for key in ("H", "W"):
            if getattr(self, key) < 32:
                raise ConfigError(key, f"must be >= 32, got {getattr(self, key)}")
        try:
            plan = plan_alignment(self.H, self.W, self.P_v, self.P_g)
        except ValueError as err:
            raise ConfigError("P_v", str(err)) from None
        if self.C_llm % self.heads:
            raise ConfigError("heads", f"{self.heads} does not divide C_llm={self.C_llm}")
        if self.C_geo < 2:
            raise ConfigError("C_geo", "needs at least 2 channels (one holds depth)")
        if self.gating not in GATING_MODES:
            raise ConfigError("gating", f"must be one of {GATING_MODES}, got {self.gating!r}")
        if self.gate_granularity not in ("channel", "token"):
            raise ConfigError("gate_granularity", "must be 'channel' or 'token'")
        if not (self.peak_lr >= 0 and math.isfinite(self.peak_lr)):
            raise ConfigError("peak_lr", f"must be a finite value >= 0, got {self.peak_lr}")
        if not 0 <= self.warmup_ratio < 1:
            raise ConfigError("warmup_ratio", f"must lie in [0, 1), got {self.warmup_ratio}")
        bad = set(self.trainable_groups()) - set(TRAINABLE_GROUPS)
        if bad:
            raise ConfigError("trainable", f"unknown groups {sorted(bad)}; choose from {TRAINABLE_GROUPS}")
        if not math.isfinite(self.init_alpha):
            raise ConfigError("init_alpha", "must be finite")
        seq = self.N * plan.tokens_per_frame + len(question_for(self.task))
        if seq > 4096:
            raise ConfigError("H", f"sequence of {seq} tokens is too long for the toy decoder")
        if self.task == "nearer_of_two" and min(self.H, self.W) < 48:
            raise ConfigError("H", "nearer_of_two needs H, W >= 48 to place two marked objects")
        if self.task != "nearer_of_two" and min(self.H, self.W) < 80:
            raise ConfigError("H", f"{self.task} needs H, W >= 80 to place three marked objects")
        return self

    def estimator(self):
        return GuideClassifier(K=self.K, m=self.m, P_v=self.P_v, P_g=self.P_g, C_geo=self.C_geo,
                               C_llm=self.C_llm, L_dec=self.L_dec, heads=self.heads, ffn=self.ffn,
                               gating=self.gating, gate_granularity=self.gate_granularity,
                               n_answers=3, steps=self.steps, batch=self.batch, peak_lr=self.peak_lr,
                               warmup_ratio=self.warmup_ratio, trainable=self.trainable_groups(),
                               init_alpha=self.init_alpha, seed=self.seed)


def _coerce(key, value, typ):
    typ = {"int": int, "float": float, "str": str}.get(typ, typ)
    try:
        if typ is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError
            return int(value)
        if typ is float:
            if isinstance(value, bool):
                raise ValueError
            return float(value)
        if typ is str:
            if isinstance(value, (list, tuple)):
                return ",".join(str(v) for v in value)
            return str(value)
    except (TypeError, ValueError):
        pass
    raise ConfigError(key, f"expected {typ.__name__}, got {value!r}")


def build_stamp():
    """``git describe`` of the source tree when available, else the package version."""
    here = Path(__file__).resolve().parent
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=here,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"geoguide-{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"geoguide-{__version__}"


# ------------------------------------------------------------------- data

@functools.lru_cache(maxsize=8)
def _pool(task, size, seed, scene_cfg):
    return tuple(make_task_batch(task, size, seed, scene_cfg))


def task_pools(cfg):
    """Seeded train and eval instance pools for ``cfg`` (cached per process)."""
    scene = cfg.scene_config()
    train = _pool(cfg.task, cfg.train_size, 2 * cfg.data_seed + 1, scene)
    evals = _pool(cfg.task, cfg.eval_size, 2 * cfg.data_seed + 2, scene)
    return list(train), list(evals)


# ------------------------------------------------------------------- runs

@dataclass
class RunResult:
    config: RunConfig
    trace: list
    status: str = "ok"
    failed_step: int = None
    model: object = None

    @property
    def final_eval(self):
        evals = [r["eval_acc"] for r in self.trace if r["eval_acc"] is not None]
        return evals[-1] if evals else None

    @property
    def final_gate_open(self):
        return self.trace[-1]["gate_open_mean"] if self.trace else None


def prepare_output(out):
    """Create ``out``; refuse a directory that already has files in it."""
    path = Path(out)
    if path.exists() and (not path.is_dir() or any(path.iterdir())):
        raise FileExistsError(f"output directory {path} is not empty")
    path.mkdir(parents=True, exist_ok=True)
    return path


def train_run(cfg, out=None, progress=None):
    """Train one configuration; writes manifest, trace, checkpoint and plot data to ``out``.

    Returns a :class:`RunResult`. A non-finite loss stops the run with status
    ``"nonfinite"`` and the offending step recorded.
    """
    cfg.validate()
    path = prepare_output(out) if out is not None else None
    train, evals = task_pools(cfg)
    model = cfg.estimator()
    X = model.initialize(train)
    y = np.array([i.label for i in train])
    Xe = model.transform_features(evals)
    ye = np.array([i.label for i in evals])
    ident = {"task": cfg.task, "m": cfg.m, "gating": cfg.gating, "seed": cfg.seed}

    if path is not None:
        _write_json(path / "manifest.json", manifest(cfg, model))
    trace = []
    trace_fh = open(path / "trace.jsonl", "w") if path is not None else None

    def on_step(step, rec):
        rec = dict(rec)
        last = step == cfg.steps
        rec["eval_acc"] = float(np.mean(model.predict(Xe) == ye)) if (last or step % cfg.eval_every == 0) else None
        rec["gate_open_mean"] = float(np.mean(rec["gate_open"])) if rec["gate_open"] else 0.0
        rec.update(ident)
        rec = {k: rec[k] for k in TRACE_FIELDS}
        trace.append(rec)
        if trace_fh is not None:
            trace_fh.write(json.dumps(rec) + "\n")
        if progress is not None:
            progress(rec)

    result = RunResult(cfg, trace, model=model)
    try:
        model.fit(X, y, callback=on_step)
    except NonFiniteLossError as err:
        result.status, result.failed_step = "nonfinite", err.step
    finally:
        if trace_fh is not None:
            trace_fh.close()
    if path is not None:
        if result.status == "ok":
            save_checkpoint(model, path / "checkpoint")
        _write_plot_csv(path / "plot.csv", trace)
        man = manifest(cfg, model)
        man.update(status=result.status, failed_step=result.failed_step, final_eval_acc=result.final_eval)
        _write_json(path / "manifest.json", man)
    return result


def manifest(cfg, model):
    import numpy
    import sklearn

    import platform
    return {"config": cfg.to_dict(), "seed": cfg.seed, "build": build_stamp(),
            "schedule": model.schedule_.to_dict(),
            "plan": plan_alignment(cfg.H, cfg.W, cfg.P_v, cfg.P_g).to_dict(),
            "decoder": model.decoder_.cfg.to_dict(),
            "versions": {"python": platform.python_version(), "numpy": numpy.__version__,
                         "scikit-learn": sklearn.__version__}}


def save_checkpoint(model, stem):
    stem = Path(stem)
    save_tensors(stem.with_suffix(".bin"), model.decoder_.state_dict())
    _write_json(stem.with_suffix(".json"), {"decoder": model.decoder_.cfg.to_dict(),
                                            "schedule": model.schedule_.to_dict(),
                                            "tensors": stem.with_suffix(".bin").name})


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_plot_csv(path, trace):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "train_acc", "eval_acc", "lr", "gate_open_mean"])
        for r in trace:
            w.writerow([r["step"], repr(r["loss"]), repr(r["train_acc"]),
                        "" if r["eval_acc"] is None else repr(r["eval_acc"]), repr(r["lr"]),
                        repr(r["gate_open_mean"])])


# --------------------------------------------------------------- ablation

@dataclass
class AblationGrid:
    base: RunConfig
    depths: tuple = None
    modes: tuple = GATING_MODES
    seeds: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.depths is None:
            self.depths = tuple(sorted({0, 3, 6, 9, self.base.L_dec}))
        self.depths, self.modes, self.seeds = tuple(self.depths), tuple(self.modes), tuple(self.seeds)

    def cells(self, root=None):
        """One validated RunConfig per (depth, mode, seed)."""
        root = Path(root if root is not None else self.base.out)
        out = []
        for m in self.depths:
            for mode in self.modes:
                for seed in self.seeds:
                    cfg = self.base.replace(m=m, gating=mode, seed=seed,
                                            out=str(root / f"m{m}_{mode}_s{seed}"))
                    out.append(cfg.validate())
        return out


def run_grid(grid, root, progress=None):
    """Run every cell. For ``m = 0`` the gating mode has no effect, so those
    cells are trained once per seed and the trace is relabelled for the rest."""
    prepare_output(root)
    results, done = [], {}
    for cfg in grid.cells(root):
        key = (0, cfg.seed) if cfg.m == 0 else None
        if key is not None and key in done:
            src = done[key]
            path = prepare_output(cfg.out)
            trace = [dict(r, gating=cfg.gating) for r in src.trace]
            with open(path / "trace.jsonl", "w") as fh:
                for r in trace:
                    fh.write(json.dumps(r) + "\n")
            man = json.loads((Path(src.config.out) / "manifest.json").read_text())
            man["config"] = cfg.to_dict()
            man["reused_from"] = src.config.out
            _write_json(path / "manifest.json", man)
            _write_plot_csv(path / "plot.csv", trace)
            results.append(RunResult(cfg, trace, src.status, src.failed_step))
            continue
        res = train_run(cfg, cfg.out, progress)
        res.model = None
        results.append(res)
        if key is not None:
            done[key] = res
    return results


# -------------------------------------------------------------- aggregate

def read_trace(path):
    records = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as err:
                    raise SchemaError(path, f"line {line_no}", f"is not JSON ({err})") from None
    if not records:
        raise SchemaError(path, "records", "is empty")
    return records


def _check_schema(path, records, expected):
    for r in records:
        keys = set(r)
        if keys != expected:
            missing, extra = sorted(expected - keys), sorted(keys - expected)
            field = (missing or extra)[0]
            what = "is missing" if missing else "is unexpected"
            raise SchemaError(path, field, f"{what} (schema drift)")


def aggregate(paths, ref_depth=6, tolerance=0.02):
    """Per (depth, mode) mean and sample sd of the final eval accuracy over seeds.

    Returns ``{"rows": [...], "checks": [...], "warnings": [...]}``; rows are
    ordered by depth, then gating mode as in :data:`GATING_MODES`.
    """
    paths = [str(p) for p in paths]
    if not paths:
        raise ValueError("no traces given")
    expected = None
    cells = {}
    for p in sorted(paths):
        recs = read_trace(p)
        if expected is None:
            expected = set(recs[0])
            missing = set(TRACE_FIELDS) - expected
            if missing:
                raise SchemaError(p, sorted(missing)[0], "is missing")
        _check_schema(p, recs, expected)
        evals = [r["eval_acc"] for r in recs if r["eval_acc"] is not None]
        if not evals:
            raise SchemaError(p, "eval_acc", "never recorded")
        last = recs[-1]
        key = (int(last["m"]), last["gating"])
        cells.setdefault(key, []).append((last["seed"], evals[-1], last["gate_open_mean"], last["task"]))

    warns = []
    rows = []
    order = {g: i for i, g in enumerate(GATING_MODES)}
    for (m, mode) in sorted(cells, key=lambda k: (k[0], order.get(k[1], len(order)), k[1])):
        runs = sorted(cells[(m, mode)])
        accs = np.array([a for _, a, _, _ in runs])
        gates = np.array([g for _, _, g, _ in runs])
        if len(runs) == 1:
            sd = 0.0
            warns.append(f"m={m} {mode}: single seed, sd reported as 0")
        else:
            sd = float(np.std(accs, ddof=1))
        rows.append({"m": m, "gating": mode, "task": runs[0][3], "n_seeds": len(runs),
                     "seeds": [s for s, _, _, _ in runs], "acc_mean": float(np.mean(accs)),
                     "acc_sd": sd, "gate_open_mean": float(np.mean(gates)), "baseline": m == 0})
    for w in warns:
        warnings.warn(w, stacklevel=2)
    return {"rows": rows, "checks": ordering_checks(rows, ref_depth, tolerance), "warnings": warns}


def ordering_checks(rows, ref_depth=6, tolerance=0.02):
    """Directional comparisons between ablation rows, each with a tolerance band."""
    acc = {(r["m"], r["gating"]): r["acc_mean"] for r in rows}
    deepest = max((r["m"] for r in rows), default=None)
    specs = [
        (f"m={ref_depth}: sem+glo >= sem", (ref_depth, "sem+glo"), (ref_depth, "sem")),
        (f"m={ref_depth}: sem >= none", (ref_depth, "sem"), (ref_depth, "none")),
        (f"none: m={deepest} <= m={ref_depth}", (ref_depth, "none"), (deepest, "none")),
    ]
    checks = []
    for name, hi, lo in specs:
        if hi not in acc or lo not in acc or hi == lo:
            checks.append({"check": name, "status": "skipped", "lhs": None, "rhs": None})
            continue
        ok = acc[hi] >= acc[lo] - tolerance
        checks.append({"check": name, "status": "pass" if ok else "fail", "lhs": acc[hi], "rhs": acc[lo],
                       "tolerance": tolerance})
    return checks


def write_report(result, out):
    """Write ``results.csv`` and ``results.json``; identical input gives identical bytes."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["m", "gating", "task", "n_seeds", "acc_mean", "acc_sd", "gate_open_mean", "baseline"])
    for r in result["rows"]:
        w.writerow([r["m"], r["gating"], r["task"], r["n_seeds"], f"{r['acc_mean']:.6f}",
                    f"{r['acc_sd']:.6f}", f"{r['gate_open_mean']:.6f}", int(r["baseline"])])
    (out / "results.csv").write_text(buf.getvalue())
    (out / "results.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return out / "results.csv", out / "results.json"


def find_traces(root):
    return sorted(str(p) for p in Path(root).rglob("trace.jsonl"))

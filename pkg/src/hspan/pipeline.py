"""Experiment orchestration: prepare -> upsample -> train -> fuse -> evaluate,
plus the lambda sweep and the final report with figures.

Every stage writes into ``<output_root>/<stage>/`` and leaves a ``stage.json``
recording the hash of the config section it consumed, the hashes of its
upstream stage records, its own output hashes, the seed and timestamps.
A stage whose record matches the current config and inputs is skipped.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image

from .datamodel import HSICube, PANImage, FusionSample, read_cube, read_pan, write_cube, write_pan
from .degrade import DegradeSpec, make_sample, partition_patches
from .dip import METHODS, DIPConfig, upsample as run_upsample
from .errors import (
    ConfigHashMismatchError,
    DimensionMismatchError,
    MissingArtifactError,
    ParameterError,
)
from .hyperkite import HyperKiteConfig, fuse as fuse_cubes, load_checkpoint, predict, save_checkpoint, train as train_hyperkite
from .metrics import METRIC_NAMES, evaluate as evaluate_pair
from .srf import save_response
from .toy import toy_scene

log = logging.getLogger(__name__)

STAGES = ("prepare", "upsample", "train", "fuse", "evaluate", "sweep", "report")
UPSTREAM = {
    "prepare": (),
    "upsample": ("prepare",),
    "train": ("prepare", "upsample"),
    "fuse": ("prepare", "upsample", "train"),
    "evaluate": ("prepare", "fuse"),
    "sweep": ("prepare",),
    "report": ("prepare", "fuse", "evaluate"),
}
DEFAULT_SWEEP = [round(0.1 * i, 1) for i in range(11)]
STAGE_RECORD = "stage.json"


# --- config ---------------------------------------------------------------------


@dataclass
class SplitSpec:
    seed: int = 0
    train_count: Optional[int] = None
    train_ratio: float = 0.5
    train_ids: Optional[List[str]] = None
    test_ids: Optional[List[str]] = None


@dataclass
class ExperimentConfig:
    dataset_name: str = "toy"
    scene: Optional[str] = None
    toy: dict = field(default_factory=lambda: {"seed": 0, "rows": 4, "cols": 4, "bands": 4, "tile": 32})
    normalize: bool = True
    degrade: DegradeSpec = field(default_factory=lambda: DegradeSpec(beta=2, pan_band_count=3))
    patch_size: int = 32
    split: SplitSpec = field(default_factory=SplitSpec)
    method: str = "dip-qss"
    dip: DIPConfig = field(default_factory=DIPConfig)
    hyperkite: HyperKiteConfig = field(default_factory=HyperKiteConfig)
    fuse: dict = field(default_factory=lambda: {"clamp": True, "bypass": False, "tile": None, "overlap": 8})
    evaluate: dict = field(default_factory=lambda: {"ergas_as_printed": False, "per_band": False})
    lambda_sweep: List[float] = field(default_factory=lambda: list(DEFAULT_SWEEP))
    rgb_bands: Tuple[int, int, int] = (0, 1, 2)
    output_root: str = "runs/toy"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ParameterError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if len(self.rgb_bands) != 3:
            raise ParameterError("rgb_bands must list exactly three band indices")
        self.rgb_bands = tuple(int(b) for b in self.rgb_bands)
        self.lambda_sweep = [float(v) for v in self.lambda_sweep]

    def to_dict(self) -> dict:
        deg = self.degrade.to_dict()
        deg.pop("sigma")
        return {
            "dataset_name": self.dataset_name,
            "scene": self.scene,
            "toy": dict(self.toy),
            "normalize": self.normalize,
            "degrade": deg,
            "patch_size": self.patch_size,
            "split": asdict(self.split),
            "method": self.method,
            "dip": self.dip.to_dict(),
            "hyperkite": self.hyperkite.to_dict(),
            "fuse": dict(self.fuse),
            "evaluate": dict(self.evaluate),
            "lambda_sweep": list(self.lambda_sweep),
            "rgb_bands": list(self.rgb_bands),
            "output_root": self.output_root,
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        d = dict(raw)
        try:
            if "degrade" in d:
                deg = {k: v for k, v in d["degrade"].items() if k != "sigma"}
                d["degrade"] = DegradeSpec(**deg)
            if "split" in d:
                d["split"] = SplitSpec(**d["split"])
            if "dip" in d:
                d["dip"] = DIPConfig(**d["dip"])
            if "hyperkite" in d:
                d["hyperkite"] = HyperKiteConfig(**d["hyperkite"])
        except TypeError as exc:
            raise ParameterError(f"bad config section: {exc}") from None
        for key, default in (("fuse", cls().fuse), ("evaluate", cls().evaluate), ("toy", cls().toy)):
            if key in d:
                extra = set(d[key]) - set(default)
                if extra:
                    raise ParameterError(f"unknown keys in {key}: {sorted(extra)}")
                d[key] = {**default, **d[key]}
        return cls(**d)

    @property
    def root(self) -> Path:
        return Path(self.output_root)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def load_config(path) -> ExperimentConfig:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParameterError(f"config {path} is not valid JSON: {exc}") from None
    return ExperimentConfig.from_dict(raw)


def apply_overrides(config: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` overrides; values parse as JSON, else as strings."""
    raw = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ParameterError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = raw
        parts = key.split(".")
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ParameterError(f"override path {key!r} does not name a config section")
            node = node[p]
        if parts[-1] not in node:
            raise ParameterError(f"unknown config key {key!r}")
        node[parts[-1]] = parsed
    return ExperimentConfig.from_dict(raw)


def stage_section(config: ExperimentConfig, stage: str) -> dict:
    """The part of the config a stage depends on; its hash guards reruns."""
    d = config.to_dict()
    if stage == "prepare":
        keys = ("dataset_name", "scene", "toy", "normalize", "degrade", "patch_size", "split")
    elif stage == "upsample":
        keys = ("method", "dip")
    elif stage == "train":
        keys = ("hyperkite",)
    elif stage == "fuse":
        keys = ("fuse",)
    elif stage == "evaluate":
        keys = ("evaluate",)
    elif stage == "sweep":
        keys = ("dip", "lambda_sweep", "evaluate")
    elif stage == "report":
        keys = ("rgb_bands",)
    else:
        raise ParameterError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return {k: d[k] for k in keys}


def config_hash(config: ExperimentConfig, stage: str) -> str:
    return sha256_text(canonical_json({"stage": stage, "config": stage_section(config, stage)}))


# --- provenance -----------------------------------------------------------------


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_outputs(stage_dir: Path) -> Dict[str, str]:
    out = {}
    for p in sorted(stage_dir.rglob("*")):
        if p.is_file() and p.name != STAGE_RECORD:
            out[p.relative_to(stage_dir).as_posix()] = file_sha256(p)
    return out


def read_record(stage_dir: Path) -> Optional[dict]:
    path = stage_dir / STAGE_RECORD
    if not path.exists():
        return None
    return json.loads(path.read_text(encoding="utf-8"))


def record_digest(record: dict) -> str:
    return sha256_text(canonical_json(record["outputs"]))


def verify_stage(stage_dir) -> bool:
    """True when every output listed in stage.json still hashes to its recorded value."""
    stage_dir = Path(stage_dir)
    record = read_record(stage_dir)
    if record is None:
        return False
    return hash_outputs(stage_dir) == record["outputs"]


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _input_hashes(config: ExperimentConfig, stage: str, needed: Sequence[str]) -> Dict[str, str]:
    hashes = {}
    for up in needed:
        record = read_record(config.root / up)
        if record is None:
            raise MissingArtifactError(f"stage {stage!r} needs {up!r}, which has not been run under {config.root}")
        hashes[up] = record_digest(record)
    return hashes


def _upstream(config: ExperimentConfig, stage: str) -> Tuple[str, ...]:
    if stage in ("train", "fuse") and config.fuse.get("bypass"):
        return ("prepare",) if stage == "fuse" else UPSTREAM[stage]
    if stage == "report":
        ups = UPSTREAM["report"]
        if (config.root / "sweep" / STAGE_RECORD).exists():
            ups = ups + ("sweep",)
        return ups
    return UPSTREAM[stage]


# --- stage bodies ---------------------------------------------------------------


def _load_scene(config: ExperimentConfig) -> HSICube:
    if config.scene:
        scene = read_cube(config.scene)
    else:
        t = config.toy
        scene = toy_scene(t["seed"], t["rows"], t["cols"], t["bands"], t["tile"])
    if config.normalize:
        peak = float(np.max(scene.data))
        if peak <= 0:
            raise ParameterError("cannot normalize a scene whose maximum is <= 0")
        scene = HSICube((scene.data / peak).astype(np.float32), value_range=(0.0, 1.0), name=scene.name)
    return scene


def _split(ids: List[str], spec: SplitSpec) -> Tuple[List[str], List[str]]:
    if spec.train_ids is not None or spec.test_ids is not None:
        train_ids = list(spec.train_ids or [])
        test_ids = list(spec.test_ids if spec.test_ids is not None else [i for i in ids if i not in train_ids])
    else:
        n_train = spec.train_count if spec.train_count is not None else int(round(spec.train_ratio * len(ids)))
        if not 0 <= n_train <= len(ids):
            raise ParameterError(f"train_count {n_train} outside [0, {len(ids)}]")
        order = np.random.default_rng(spec.seed).permutation(len(ids))
        train_ids = sorted(ids[i] for i in order[:n_train])
        test_ids = sorted(ids[i] for i in order[n_train:])
    if set(train_ids) & set(test_ids):
        raise ParameterError(f"train and test ids overlap: {sorted(set(train_ids) & set(test_ids))}")
    if set(train_ids) | set(test_ids) != set(ids):
        raise ParameterError("train and test ids must cover every sample in the manifest")
    return train_ids, test_ids


def _prepare(config: ExperimentConfig, out: Path) -> dict:
    scene = _load_scene(config)
    tiles = partition_patches(scene, config.patch_size)
    width = max(3, len(str(len(tiles) - 1)))
    ids = [f"p{i:0{width}d}" for i in range(len(tiles))]
    train_ids, test_ids = _split(ids, config.split)
    train_set = set(train_ids)
    entries = []
    for pid, tile in zip(ids, tiles):
        sample = make_sample(tile, config.degrade, patch_id=pid, dataset_name=config.dataset_name)
        base = out / "samples" / pid
        write_cube(sample.reference, base / "ref", config.dataset_name)
        write_cube(sample.lr_hsi, base / "lr", config.dataset_name)
        write_pan(sample.pan, base / "pan", config.dataset_name)
        entries.append({"id": pid, "split": "train" if pid in train_set else "test", "dir": f"samples/{pid}"})
    manifest = {
        "dataset_name": config.dataset_name,
        "beta": config.degrade.beta,
        "degrade": config.degrade.to_dict(),
        "patch_size": config.patch_size,
        "bands": scene.bands,
        "samples": entries,
        "split": {"seed": config.split.seed, "train_ids": train_ids, "test_ids": test_ids},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return {"samples": len(entries), "train": len(train_ids), "test": len(test_ids)}


def load_manifest(root) -> dict:
    path = Path(root) / "prepare" / "manifest.json"
    if not path.exists():
        raise MissingArtifactError(f"no manifest at {path}; run the prepare stage first")
    return json.loads(path.read_text(encoding="utf-8"))


def load_sample(root, sample_id: str, manifest: Optional[dict] = None) -> FusionSample:
    manifest = manifest or load_manifest(root)
    base = Path(root) / "prepare" / "samples" / sample_id
    if not base.exists():
        raise MissingArtifactError(f"sample {sample_id!r} missing under {base.parent}")
    return FusionSample(
        lr_hsi=read_cube(base / "lr"),
        pan=read_pan(base / "pan"),
        reference=read_cube(base / "ref"),
        beta=manifest["beta"],
        patch_id=sample_id,
        dataset_name=manifest["dataset_name"],
    )


def _write_trace(state, path: Path) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["iteration", "spectral_term", "spatial_term"])
    for it, spec, spat in state.energy_trace:
        w.writerow([it, repr(spec), repr(spat)])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _upsample(config: ExperimentConfig, out: Path) -> dict:
    manifest = load_manifest(config.root)
    for entry in manifest["samples"]:
        sample = load_sample(config.root, entry["id"], manifest)
        cube, state = run_upsample(sample, config.method, config.dip)
        base = out / "samples" / entry["id"]
        write_cube(cube, base / "x_dip", config.dataset_name)
        if state is not None:
            _write_trace(state, base / "trace.csv")
            save_response(state.response, base / "srf.json")
        log.info("upsampled %s with %s", entry["id"], config.method)
    return {"samples": len(manifest["samples"]), "method": config.method}


def _train(config: ExperimentConfig, out: Path) -> dict:
    manifest = load_manifest(config.root)
    triples = []
    for pid in manifest["split"]["train_ids"]:
        sample = load_sample(config.root, pid, manifest)
        x_dip = read_cube(config.root / "upsample" / "samples" / pid / "x_dip")
        triples.append((x_dip, sample.pan, sample.reference))
    if not triples:
        raise MissingArtifactError("the manifest has no training samples")
    model, history = train_hyperkite(triples, config.hyperkite)
    save_checkpoint(model, out / "hyperkite.ckpt", extra={"train_ids": manifest["split"]["train_ids"]})
    lines = ["epoch,loss"] + [f"{e},{v!r}" for e, v in enumerate(history)]
    (out / "loss.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"epochs": len(history), "initial_loss": history[0], "final_loss": history[-1]}


def _fuse(config: ExperimentConfig, out: Path) -> dict:
    manifest = load_manifest(config.root)
    bypass = bool(config.fuse.get("bypass"))
    model = None
    if not bypass:
        model, _ = load_checkpoint(config.root / "train" / "hyperkite.ckpt")
    for pid in manifest["split"]["test_ids"]:
        sample = load_sample(config.root, pid, manifest)
        if bypass:
            # plumbing check: x_dip := x_ref and a zero residual
            x_dip = sample.reference
            x_res = HSICube(np.zeros(x_dip.shape, dtype=np.float32), value_range=x_dip.value_range)
        else:
            x_dip = read_cube(config.root / "upsample" / "samples" / pid / "x_dip")
            x_res = predict(model, x_dip, sample.pan, tile=config.fuse.get("tile"), overlap=config.fuse.get("overlap", 8))
        fused = fuse_cubes(x_dip, x_res, clamp=bool(config.fuse.get("clamp", True)))
        base = out / "samples" / pid
        write_cube(x_res, base / "residual", config.dataset_name)
        write_cube(fused, base / "fused", config.dataset_name)
    return {"samples": len(manifest["split"]["test_ids"]), "bypass": bypass}


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isinf(v):
        return "inf" if v > 0 else "-inf"
    if math.isnan(v):
        return "nan"
    return format(v, ".10g")


def _mean_row(rows: List[dict]) -> dict:
    return {name: float(np.mean([r[name] for r in rows])) for name in METRIC_NAMES}


def write_table(path: Path, key: str, rows: List[dict], mean_label: Optional[str] = "mean") -> None:
    """Flat CSV: one row per entry plus an optional mean row. Byte-stable formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([key, *METRIC_NAMES])
    for r in rows:
        w.writerow([_fmt(r[key]), *(_fmt(r[m]) for m in METRIC_NAMES)])
    if rows and mean_label is not None:
        mean = _mean_row(rows)
        w.writerow([mean_label, *(_fmt(mean[m]) for m in METRIC_NAMES)])
    path.write_text(buf.getvalue(), encoding="utf-8")


def evaluate_cubes(pairs: Sequence[Tuple[str, HSICube, HSICube]], beta: int, opts: dict) -> List[dict]:
    rows = []
    for pid, x, ref in pairs:
        report = evaluate_pair(x.data, ref.data, beta, per_band=bool(opts.get("per_band")),
                               ergas_as_printed=bool(opts.get("ergas_as_printed")))
        rows.append({"sample_id": pid, **report.to_json(), **{f"_{k}": v for k, v in report.scalars().items()}})
    return rows


def _numeric(rows):
    return [{"sample_id": r["sample_id"], **{m: r[f"_{m}"] for m in METRIC_NAMES}} for r in rows]


def _evaluate(config: ExperimentConfig, out: Path) -> dict:
    manifest = load_manifest(config.root)
    pairs = []
    for pid in manifest["split"]["test_ids"]:
        ref = read_cube(config.root / "prepare" / "samples" / pid / "ref")
        fused = read_cube(config.root / "fuse" / "samples" / pid / "fused")
        pairs.append((pid, fused, ref))
    if not pairs:
        log.warning("evaluate: no test samples; writing an empty report")
    rows = evaluate_cubes(pairs, manifest["beta"], config.evaluate)
    numeric = _numeric(rows)
    mean = _mean_row(numeric) if numeric else None
    clean = [{k: v for k, v in r.items() if not k.startswith("_")} for r in rows]
    report = {
        "dataset_name": manifest["dataset_name"],
        "beta": manifest["beta"],
        "samples": clean,
        "mean": {k: _fmt(v) if not math.isfinite(v) else v for k, v in mean.items()} if mean else None,
    }
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    write_table(out / "report.csv", "sample_id", numeric)
    return {"samples": len(rows)}


def _sweep(config: ExperimentConfig, out: Path) -> dict:
    manifest = load_manifest(config.root)
    rows = []
    for lam in config.lambda_sweep:
        dip = DIPConfig(**{**config.dip.to_dict(), "lam": lam, "use_spatial": True})
        pairs = []
        for pid in manifest["split"]["test_ids"]:
            sample = load_sample(config.root, pid, manifest)
            cube, state = run_upsample(sample, "dip-qss", dip)
            base = out / f"lambda_{lam:.2f}" / pid
            write_cube(cube, base / "x_dip", config.dataset_name)
            _write_trace(state, base / "trace.csv")
            pairs.append((pid, cube, sample.reference))
        numeric = _numeric(evaluate_cubes(pairs, manifest["beta"], config.evaluate))
        if numeric:
            rows.append({"lambda": lam, **_mean_row(numeric)})
        log.info("sweep lambda=%.2f done", lam)
    write_table(out / "sweep.csv", "lambda", rows, mean_label=None)
    return {"lambdas": len(rows)}


def emit_error_map(x: HSICube, ref: HSICube, path) -> Tuple[Path, Path]:
    """Per-pixel mean |x - ref| over bands: an 8-bit min-max-stretched PGM plus the raw map as .npy."""
    if x.shape != ref.shape:
        raise DimensionMismatchError(f"shape mismatch {x.shape} vs {ref.shape}", axis="bands")
    raw = np.abs(np.asarray(x.data, dtype=np.float64) - np.asarray(ref.data, dtype=np.float64)).mean(axis=0)
    lo, hi = float(raw.min()), float(raw.max())
    scaled = np.zeros_like(raw) if hi == lo else (raw - lo) / (hi - lo)
    img = np.round(scaled * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    pgm = path.with_suffix(".pgm")
    npy = path.with_suffix(".npy")
    Image.fromarray(img).save(pgm)
    np.save(npy, raw)
    return pgm, npy


def emit_rgb(x: HSICube, bands: Sequence[int], path) -> Path:
    """False-colour PPM. ``bands`` lists the (blue, green, red) source bands; each channel is stretched alone."""
    if len(bands) != 3:
        raise ParameterError("need exactly three band indices")
    for b in bands:
        if not 0 <= b < x.bands:
            raise ParameterError(f"band index {b} out of range for a {x.bands}-band cube")
    chans = []
    for b in (bands[2], bands[1], bands[0]):
        c = np.asarray(x.data[b], dtype=np.float64)
        lo, hi = float(c.min()), float(c.max())
        chans.append(np.full(c.shape, 0.5) if hi == lo else (c - lo) / (hi - lo))
    img = np.round(np.stack(chans, axis=-1) * 255.0).astype(np.uint8)
    path = Path(path).with_suffix(".ppm")
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(img).save(path)
    return path


def _report(config: ExperimentConfig, out: Path) -> dict:
    manifest = load_manifest(config.root)
    for pid in manifest["split"]["test_ids"]:
        ref = read_cube(config.root / "prepare" / "samples" / pid / "ref")
        fused = read_cube(config.root / "fuse" / "samples" / pid / "fused")
        emit_error_map(fused, ref, out / "figures" / f"{pid}_error")
        emit_rgb(fused, config.rgb_bands, out / "figures" / f"{pid}_fused_rgb")
        emit_rgb(ref, config.rgb_bands, out / "figures" / f"{pid}_ref_rgb")
    lines = [f"# {manifest['dataset_name']} (beta={manifest['beta']})", "", "## Test-set metrics", ""]
    lines += _markdown_table(config.root / "evaluate" / "report.csv")
    sweep_csv = config.root / "sweep" / "sweep.csv"
    if sweep_csv.exists():
        lines += ["", "## Lambda sweep (DIP output vs reference)", ""]
        lines += _markdown_table(sweep_csv)
    (out / "summary.md").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return {"figures": 3 * len(manifest["split"]["test_ids"])}


def _markdown_table(path: Path) -> List[str]:
    rows = list(csv.reader(path.read_text(encoding="utf-8").splitlines()))
    if not rows:
        return []
    out = ["| " + " | ".join(rows[0]) + " |", "|" + "---|" * len(rows[0])]
    out += ["| " + " | ".join(r) + " |" for r in rows[1:]]
    return out


_BODIES = {
    "prepare": _prepare,
    "upsample": _upsample,
    "train": _train,
    "fuse": _fuse,
    "evaluate": _evaluate,
    "sweep": _sweep,
    "report": _report,
}


def _seed_for(config: ExperimentConfig, stage: str) -> int:
    if stage == "prepare":
        return config.split.seed
    if stage == "train":
        return config.hyperkite.seed
    return config.dip.seed


def run_stage(config: ExperimentConfig, stage: str, force: bool = False) -> dict:
    """Run one stage (or skip it when its record already matches). Returns the stage record."""
    if stage not in _BODIES:
        raise ParameterError(f"unknown stage {stage!r}; expected one of {STAGES}")
    out = config.root / stage
    chash = config_hash(config, stage)
    inputs = _input_hashes(config, stage, _upstream(config, stage))
    previous = read_record(out)
    if previous is not None and not force:
        if previous["config_hash"] != chash:
            raise ConfigHashMismatchError(
                f"{out} was produced with config hash {previous['config_hash'][:12]}, "
                f"current is {chash[:12]}; use a new output_root or force the rerun"
            )
        if previous["inputs"] == inputs and verify_stage(out):
            log.info("stage %s up to date; skipping", stage)
            return previous
    if out.exists():
        _clear(out)
    out.mkdir(parents=True, exist_ok=True)
    torch.use_deterministic_algorithms(True, warn_only=True)
    started = _now()
    summary = _BODIES[stage](config, out)
    record = {
        "stage": stage,
        "config_hash": chash,
        "config": stage_section(config, stage),
        "seed": _seed_for(config, stage),
        "inputs": inputs,
        "outputs": hash_outputs(out),
        "summary": summary,
        "started": started,
        "finished": _now(),
    }
    (out / STAGE_RECORD).write_text(json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return record


def _clear(path: Path) -> None:
    for p in sorted(path.rglob("*"), key=lambda q: len(q.parts), reverse=True):
        p.unlink() if p.is_file() else p.rmdir()


def write_config(config: ExperimentConfig) -> Path:
    config.root.mkdir(parents=True, exist_ok=True)
    path = config.root / "config.json"
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def run_pipeline(config: ExperimentConfig, stages: Optional[Sequence[str]] = None, force: bool = False) -> Dict[str, dict]:
    """Run stages in order. Defaults to the full chain; the sweep runs only if lambdas are configured."""
    if stages is None:
        stages = ["prepare"]
        if not config.fuse.get("bypass"):
            stages += ["upsample", "train"]
        stages += ["fuse", "evaluate"]
        if config.lambda_sweep:
            stages.append("sweep")
        stages.append("report")
    write_config(config)
    return {s: run_stage(config, s, force=force) for s in stages}

"""The staged workflow behind the command line: data, MSE training, covariance
estimation, MDG retraining, the kappa sweep, evaluation, and sampling.

Every stage writes into its own directory under the run root::

    data/            hr/sub{r}_t{t}.dsrt, manifest.csv
    stage1/          model.dsrt, curves.csv
    stage2a/         residuals.dsrt, s_global.dsrt, s_unreg.dsrt, spectrum CSVs
    stage2b/kappa_K/ s_image.dsrt, prior_sigma.dsrt
    stage3/MODE/     model.dsrt, curves.csv, status.json
    sweep/           report.csv, kappa_K/...
    evaluate/        metrics_MODEL.csv, mape_vs_bicubic.csv, slices.csv, ...
    samples/         MODEL_imageI.dsrt, MODEL_imageI_boxplot.dsrt

and a ``provenance.json`` plus the resolved ``config.ini`` next to the
outputs. Provenance records the dataset manifest hash, the config hash, a
fingerprint of the settings the stage depends on, and sha256 digests of its
inputs and outputs. Downstream stages refuse inputs whose provenance does not
match the current dataset and settings.
"""

import csv
import hashlib
import io
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import (
    GrfSpec,
    bicubic_upsample,
    build_split,
    denormalize,
    read_tensor,
    split_time_ordered,
    synthetic_groups,
    write_tensor,
)
from .exceptions import (
    CollapseWarning,
    ConfigError,
    MissingArtifactError,
    ProvenanceMismatchError,
    TensorFileError,
    TrainingDivergenceError,
)
from .model import Architecture, TrainConfig, predict, train_stage1, train_stage3
from .nn import LRSchedule
from .spectral import (
    InformationSharingCovariance,
    covariance_by_separation,
    global_mle,
    image_mle_unregularized,
    wavenumber_spectrum,
)
from .uq import (
    SampleEnsemble,
    coverage,
    default_slice_rows,
    gradient_mape,
    mape,
    slice_boxplot,
    surface_boxplot,
)

MODELS = ("bicubic", "stage1", "stage3-global", "stage3-image")

# settings each stage's outputs depend on, cumulative down the chain
_DATA_KEYS = [("run", "seed"), ("data", None)]
_STAGE1_KEYS = _DATA_KEYS + [("model", None), ("stage1", None)]
_STAGE2A_KEYS = _STAGE1_KEYS + [("stage2", "residuals"), ("stage2", "eps_s")]
_STAGE2B_KEYS = _STAGE2A_KEYS + [("stage2", "eps_sigma"), ("stage2", "selection")]
_STAGE3_KEYS = _STAGE2B_KEYS + [("stage3", None), ("run", "cycles")]


# ---------------------------------------------------------------- utilities

def sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, header, rows):
    """Write rows with round-trippable float formatting (reruns are byte-identical)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _atomic_write_text(path, buf.getvalue())


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _atomic_write_text(path, text):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_json(path, obj):
    _atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def kappa_tag(kappa):
    if math.isinf(kappa):
        return "kappa_inf"
    if kappa == 0:
        return "kappa_unreg"
    return f"kappa_{kappa:g}"


def fingerprint(cfg, keys, extra=None):
    material = {}
    for section, key in keys:
        entries = cfg[section] if key is None else {key: cfg[section][key]}
        for k, v in entries.items():
            material[f"{section}.{k}"] = str(v)
    if extra:
        material.update({f"extra.{k}": str(v) for k, v in extra.items()})
    return hashlib.sha256(json.dumps(material, sort_keys=True).encode()).hexdigest()


def architecture(cfg):
    m, d = cfg["model"], cfg["data"]
    return Architecture(d["factor"], m["channels"], m["n_layers"], m["kernel_size"])


def train_config(cfg, stage, epochs=None):
    sec = cfg["stage1" if stage == 1 else "stage3"]
    schedule = LRSchedule(sec["schedule"], sec["lr"], sec["lr_rate"], sec["lr_floor"])
    return TrainConfig(epochs or sec["epochs"], sec["batch_size"], schedule, cfg["run"]["seed"], stage)


# ---------------------------------------------------------------- workspace

@dataclass
class Workspace:
    """Run root plus the configuration every stage reads."""

    root: Path
    cfg: object

    def __post_init__(self):
        self.root = Path(self.root)

    @property
    def data_dir(self):
        return self.root / "data"

    @property
    def stage1_dir(self):
        return self.root / "stage1"

    @property
    def stage2a_dir(self):
        return self.root / "stage2a"

    def stage2b_dir(self, kappa):
        return self.root / "stage2b" / kappa_tag(kappa)

    def stage3_dir(self, mode, kappa=None):
        return self.root / "stage3" / ("global" if mode == "global" else f"image_{kappa_tag(kappa)}")

    @property
    def sweep_dir(self):
        return self.root / "sweep"

    @property
    def evaluate_dir(self):
        return self.root / "evaluate"

    @property
    def samples_dir(self):
        return self.root / "samples"

    @property
    def manifest_path(self):
        return self.data_dir / "manifest.csv"

    @property
    def manifest_hash(self):
        if not self.manifest_path.exists():
            raise MissingArtifactError(f"no dataset manifest at {self.manifest_path}",
                                       hint="run `mdgsr generate` first")
        return sha256_file(self.manifest_path)

    # provenance -------------------------------------------------------

    def record(self, directory, stage, keys, inputs=(), outputs=(), extra=None, manifest_hash=None):
        directory = Path(directory)
        prov = {
            "stage": stage,
            "config_hash": self.cfg.hash(),
            "manifest_hash": manifest_hash or self.manifest_hash,
            "fingerprint": fingerprint(self.cfg, keys, extra),
            "inputs": {str(Path(p).relative_to(self.root)): sha256_file(p) for p in inputs},
            "outputs": {str(Path(p).name): sha256_file(p) for p in outputs},
        }
        _atomic_write_text(directory / "config.ini", self.cfg.to_ini())
        _write_json(directory / "provenance.json", prov)
        return prov

    def verify(self, directory, stage, keys, hint, extra=None):
        """Check that ``directory`` holds outputs matching the current dataset and settings."""
        path = Path(directory) / "provenance.json"
        if not path.exists():
            raise MissingArtifactError(f"{stage} outputs not found in {directory}", hint=hint)
        prov = json.loads(path.read_text(encoding="utf-8"))
        if prov.get("manifest_hash") != self.manifest_hash:
            raise ProvenanceMismatchError(
                f"{directory} was produced from a different dataset manifest", hint=hint)
        if prov.get("fingerprint") != fingerprint(self.cfg, keys, extra):
            raise ProvenanceMismatchError(
                f"{directory} was produced under different settings", hint=hint)
        for name, digest in prov.get("outputs", {}).items():
            f = Path(directory) / name
            if not f.exists():
                raise MissingArtifactError(f"{f} listed in provenance but missing", hint=hint)
            if sha256_file(f) != digest:
                raise ProvenanceMismatchError(f"{f} changed after it was written", hint=hint)
        return prov


# ---------------------------------------------------------------- data

def _read_field_directory(path):
    """``{subregion: [fields in time order]}`` from ``path/hr/sub{r}_t{t}.dsrt``."""
    hr = Path(path) / "hr"
    if not hr.is_dir():
        raise MissingArtifactError(f"input directory {hr} does not exist",
                                   hint="point [data] path at a directory containing hr/sub{r}_t{t}.dsrt")
    entries = []
    for f in sorted(hr.glob("sub*_t*.dsrt")):
        stem = f.stem
        try:
            r, t = stem[3:].split("_t")
            entries.append((int(r), int(t), f))
        except ValueError:
            raise ConfigError(f"{f}: file name does not follow sub{{r}}_t{{t}}.dsrt") from None
    if not entries:
        raise MissingArtifactError(f"no sub*_t*.dsrt files in {hr}")
    groups = {}
    for r, t, f in sorted(entries):
        try:
            field = read_tensor(f)
        except TensorFileError as exc:
            raise TensorFileError(f"{f}: {exc}") from None
        groups.setdefault(r, []).append(np.asarray(field, dtype=np.float64))
    return groups


def cmd_generate(ws):
    """Write the high-resolution fields and the split manifest."""
    cfg, d = ws.cfg, ws.cfg["data"]
    if d["source"] == "synthetic":
        spec = GrfSpec(
            grid=(d["grid"], d["grid"]), dc_power=d["dc_power"], ring_center=d["ring_center"],
            ring_width=d["ring_width"], ring_power=d["ring_power"],
            background_power=d["background_power"], pixel_variance=d["pixel_variance"],
            sigma_het=d["sigma_het"], mean_level=d["mean_level"], seed=cfg["run"]["seed"],
        )
        groups = synthetic_groups(spec, d["n_subregions"], d["n_snapshots"])
    else:
        groups = _read_field_directory(d["path"])
        shapes = {f.shape for fields in groups.values() for f in fields}
        if shapes != {(d["grid"], d["grid"])}:
            raise ConfigError(f"input fields have shapes {sorted(shapes)}, config says grid = {d['grid']}")
    train, test = split_time_ordered(groups, mode=d["split_mode"], train_fraction=d["train_fraction"])
    membership = {(r, t): "train" for r, t, _ in train}
    membership.update({(r, t): "test" for r, t, _ in test})

    hr_dir = ws.data_dir / "hr"
    hr_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for r, fields in groups.items():
        for t, f in enumerate(fields):
            path = hr_dir / f"sub{r}_t{t}.dsrt"
            write_tensor(path, np.asarray(f, dtype=np.float64), {"subregion": r, "time": t})
            rows.append((f"hr/{path.name}", r, t, membership[(r, t)], sha256_file(path)))
    write_csv(ws.manifest_path, ["file", "subregion", "time", "split", "sha256"], rows)
    mhash = sha256_file(ws.manifest_path)
    ws.record(ws.data_dir, "generate", _DATA_KEYS, outputs=[ws.manifest_path], manifest_hash=mhash)
    return ws.data_dir


def load_dataset(ws):
    """Verified :class:`DatasetSplit` for the run's dataset."""
    ws.verify(ws.data_dir, "generate", _DATA_KEYS, hint="run `mdgsr generate` with this config")
    d = ws.cfg["data"]
    groups = {}
    for row in read_csv(ws.manifest_path):
        path = ws.data_dir / row["file"]
        if not path.exists():
            raise MissingArtifactError(f"dataset file {path} missing", hint="rerun `mdgsr generate`")
        if sha256_file(path) != row["sha256"]:
            raise ProvenanceMismatchError(f"{path} does not match its manifest digest",
                                          hint="rerun `mdgsr generate`")
        groups.setdefault(int(row["subregion"]), []).append((int(row["time"]), read_tensor(path)))
    groups = {r: [f for _, f in sorted(items, key=lambda x: x[0])] for r, items in sorted(groups.items())}
    return build_split(groups, factor=d["factor"], offset=d["offset"], mode=d["split_mode"],
                       normalization=d["normalization"], train_fraction=d["train_fraction"])


# ---------------------------------------------------------------- checkpoints

def save_model(path, params, arch, extra=None):
    flat = np.concatenate([np.asarray(p, dtype=np.float32).ravel() for p in params])
    meta = {
        "architecture": {"factor": arch.factor, "channels": arch.channels,
                         "n_layers": arch.n_layers, "kernel_size": arch.kernel_size},
        "shapes": [list(p.shape) for p in params],
    }
    meta.update(extra or {})
    write_tensor(path, flat, meta)


def load_model(path):
    flat, meta = read_tensor(path, with_metadata=True)
    arch = Architecture(**meta["architecture"])
    params, pos = [], 0
    for shape in meta["shapes"]:
        n = int(np.prod(shape))
        params.append(flat[pos:pos + n].reshape(shape).copy())
        pos += n
    if pos != flat.size:
        raise TensorFileError(f"{path}: checkpoint holds {flat.size} values, shapes need {pos}")
    return params, arch


def _write_curves(path, curves):
    write_csv(path, ["epoch", "train_loss", "test_loss", "lr"],
              [(c["epoch"], c["train_loss"], c["test_loss"], c["lr"]) for c in curves])


# ---------------------------------------------------------------- stage 1

def cmd_stage1(ws):
    split = load_dataset(ws)
    arch = architecture(ws.cfg)
    params, curves = train_stage1(split, arch, train_config(ws.cfg, 1))
    out = ws.stage1_dir
    out.mkdir(parents=True, exist_ok=True)
    save_model(out / "model.dsrt", params, arch)
    _write_curves(out / "curves.csv", curves)
    ws.record(out, "stage1", _STAGE1_KEYS, inputs=[ws.manifest_path],
              outputs=[out / "model.dsrt", out / "curves.csv"])
    return out


def _load_stage1(ws):
    ws.verify(ws.stage1_dir, "stage1", _STAGE1_KEYS, hint="run `mdgsr stage1` first")
    return load_model(ws.stage1_dir / "model.dsrt")


# ---------------------------------------------------------------- stage 2

def residuals(params, arch, split):
    """Normalized errors ``Y - mu`` for train then test images."""
    dtype = params[0].dtype
    mu_tr = predict(params, split.lr_train.astype(dtype), arch)
    mu_te = predict(params, split.lr_test.astype(dtype), arch)
    return split.hr_train - mu_tr, split.hr_test - mu_te


def _residual_pool(ws, err_train, err_test):
    if ws.cfg["stage2"]["residuals"] == "all":
        return np.concatenate([err_train, err_test])
    return err_train


def _spectrum_csvs(directory, s):
    sep, cov = covariance_by_separation(s)
    write_csv(directory / "covariance_by_separation.csv", ["separation", "cov"], zip(sep, cov))
    k, mean_s, _ = wavenumber_spectrum(s)
    write_csv(directory / "wavenumber_spectrum.csv", ["k", "mean_s"], zip(k, mean_s))


def _write_stage2a(ws, directory, pool):
    eps = ws.cfg["stage2"]["eps_s"]
    s_g = global_mle(pool, eps)
    s_unreg = image_mle_unregularized(pool, eps)
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "residuals.dsrt", pool)
    write_tensor(directory / "s_global.dsrt", s_g)
    write_tensor(directory / "s_unreg.dsrt", s_unreg)
    _spectrum_csvs(directory, s_g)
    return s_g


def cmd_stage2a(ws):
    split = load_dataset(ws)
    params, arch = _load_stage1(ws)
    pool = _residual_pool(ws, *residuals(params, arch, split))
    out = ws.stage2a_dir
    _write_stage2a(ws, out, pool)
    names = ["residuals.dsrt", "s_global.dsrt", "s_unreg.dsrt",
             "covariance_by_separation.csv", "wavenumber_spectrum.csv"]
    ws.record(out, "stage2a", _STAGE2A_KEYS, inputs=[ws.stage1_dir / "model.dsrt"],
              outputs=[out / n for n in names])
    return out


def _load_stage2a(ws):
    ws.verify(ws.stage2a_dir, "stage2a", _STAGE2A_KEYS, hint="run `mdgsr stage2a` first")
    return read_tensor(ws.stage2a_dir / "residuals.dsrt"), read_tensor(ws.stage2a_dir / "s_global.dsrt")


def image_spectra(pool, kappa, eps_s, eps_sigma, selection="prior"):
    """Per-image regularized spectra and the prior width for one kappa."""
    est = InformationSharingCovariance(kappa=kappa, eps_s=eps_s, eps_sigma=eps_sigma,
                                       selection=selection).fit(pool)
    return est.transform(pool), est.prior_sigma_


def _write_stage2b(ws, directory, pool, kappa):
    st = ws.cfg["stage2"]
    s_image, sigma = image_spectra(pool, kappa, st["eps_s"], st["eps_sigma"], st["selection"])
    directory.mkdir(parents=True, exist_ok=True)
    write_tensor(directory / "s_image.dsrt", s_image, {"kappa": str(kappa)})
    write_tensor(directory / "prior_sigma.dsrt", sigma, {"kappa": str(kappa)})
    return s_image


def cmd_stage2b(ws, kappa=None):
    kappa = ws.cfg.kappa if kappa is None else kappa
    pool, _ = _load_stage2a(ws)
    out = ws.stage2b_dir(kappa)
    _write_stage2b(ws, out, pool, kappa)
    ws.record(out, "stage2b", _STAGE2B_KEYS, inputs=[ws.stage2a_dir / "residuals.dsrt"],
              outputs=[out / "s_image.dsrt", out / "prior_sigma.dsrt"], extra={"kappa": kappa})
    return out


def _load_stage2b(ws, kappa):
    ws.verify(ws.stage2b_dir(kappa), "stage2b", _STAGE2B_KEYS, extra={"kappa": kappa},
              hint=f"run `mdgsr stage2b` with kappa = {kappa}")
    return read_tensor(ws.stage2b_dir(kappa) / "s_image.dsrt")


# ---------------------------------------------------------------- stage 3

def _split_spectra(ws, split, s_image, s_g):
    """Train and test spectra from a pooled per-image stack."""
    n_tr = len(split.hr_train)
    s_tr = s_image[:n_tr]
    if ws.cfg["stage2"]["residuals"] == "all":
        s_te = s_image[n_tr:]
    else:
        s_te = np.broadcast_to(s_g, split.hr_test.shape).copy()
    return s_tr, s_te


def run_stage3(ws, split, arch, init, mode, s_g=None, s_image=None, kappa=None, epochs=None):
    """Train Stage 3 for ``cycles`` rounds; returns ``(params, curves_per_cycle, collapsed, ratio)``.

    Round 1 uses the supplied spectra. Each further round re-estimates them
    from the residuals of the previous round's model and continues from it.
    """
    cfg = train_config(ws.cfg, 3, epochs)
    st = ws.cfg["stage2"]
    params, history = init, []
    for cycle in range(ws.cfg["run"]["cycles"]):
        if cycle > 0:
            pool = _residual_pool(ws, *residuals(params, arch, split))
            s_g = global_mle(pool, st["eps_s"])
            if mode == "image":
                s_image, _ = image_spectra(pool, kappa, st["eps_s"], st["eps_sigma"], st["selection"])
        if mode == "global":
            s_tr = s_te = s_g
        else:
            s_tr, s_te = _split_spectra(ws, split, s_image, s_g)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", CollapseWarning)
            params, curves, collapsed, ratio = train_stage3(split, arch, params, s_tr, s_te, cfg)
        for w in caught:
            warnings.warn(w.message, w.category, stacklevel=2)
        history.append(curves)
    return params, history, collapsed, ratio


def _write_stage3(directory, arch, params, history, collapsed, ratio, extra=None):
    directory.mkdir(parents=True, exist_ok=True)
    save_model(directory / "model.dsrt", params, arch)
    _write_curves(directory / "curves.csv", history[-1])
    names = ["model.dsrt", "curves.csv", "status.json"]
    for c, curves in enumerate(history[:-1], start=1):
        _write_curves(directory / f"curves_cycle{c}.csv", curves)
        names.append(f"curves_cycle{c}.csv")
    status = {"collapsed": bool(collapsed), "spatial_variance_ratio": float(ratio),
              "cycles": len(history)}
    status.update(extra or {})
    _write_json(directory / "status.json", status)
    return [directory / n for n in names]


def cmd_stage3(ws, mode=None, kappa=None):
    mode = mode or ws.cfg["stage3"]["mode"]
    if mode not in ("global", "image"):
        raise ConfigError(f"stage3 mode must be 'global' or 'image', got {mode!r}")
    kappa = ws.cfg.kappa if kappa is None else kappa
    split = load_dataset(ws)
    params1, arch = _load_stage1(ws)
    _, s_g = _load_stage2a(ws)
    inputs = [ws.stage1_dir / "model.dsrt", ws.stage2a_dir / "s_global.dsrt"]
    s_image = None
    if mode == "image":
        s_image = _load_stage2b(ws, kappa)
        inputs.append(ws.stage2b_dir(kappa) / "s_image.dsrt")
    params, history, collapsed, ratio = run_stage3(ws, split, arch, params1, mode, s_g, s_image, kappa)
    out = ws.stage3_dir(mode, kappa)
    outputs = _write_stage3(out, arch, params, history, collapsed, ratio,
                            {"mode": mode, "kappa": None if mode == "global" else str(kappa)})
    ws.record(out, "stage3", _STAGE3_KEYS, inputs=inputs, outputs=outputs,
              extra={"mode": mode, "kappa": kappa if mode == "image" else None})
    return out


def _load_stage3(ws, mode, kappa=None):
    extra = {"mode": mode, "kappa": kappa if mode == "image" else None}
    d = ws.stage3_dir(mode, kappa)
    ws.verify(d, "stage3", _STAGE3_KEYS, extra=extra, hint=f"run `mdgsr stage3 --mode {mode}` first")
    return load_model(d / "model.dsrt")


# ---------------------------------------------------------------- metrics

def physical_predictions(params, arch, split, model, offset=0):
    """Test-set predictions in physical units for one model name."""
    if model == "bicubic":
        mu = bicubic_upsample(split.lr_test, split.factor, offset)
    else:
        mu = predict(params, split.lr_test.astype(params[0].dtype), arch).astype(np.float64)
    return denormalize(mu, split.mean, split.std)


def point_metrics(y_phys, mu_phys, eps_div):
    m = np.array([mape(y, mu, eps_div) for y, mu in zip(y_phys, mu_phys)])
    g = np.array([gradient_mape(y, mu, eps_div) for y, mu in zip(y_phys, mu_phys)])
    return m, g


# ---------------------------------------------------------------- sweep

def _sweep_one(root, cfg, kappa, epochs):
    ws = Workspace(root, cfg)
    split = load_dataset(ws)
    params1, arch = load_model(ws.stage1_dir / "model.dsrt")
    pool = read_tensor(ws.stage2a_dir / "residuals.dsrt")
    s_g = read_tensor(ws.stage2a_dir / "s_global.dsrt")
    directory = ws.sweep_dir / kappa_tag(kappa)
    s_image = _write_stage2b(ws, directory, pool, kappa)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CollapseWarning)
            params, history, collapsed, ratio = run_stage3(ws, split, arch, params1, "image",
                                                           s_g, s_image, kappa, epochs)
    except TrainingDivergenceError as exc:
        _write_json(directory / "status.json", {"diverged": True, "error": str(exc)})
        return {"kappa": kappa, "status": "diverged", "collapsed": True, "ratio": float("nan"),
                "rel_mape": float("nan"), "rel_grad_mape": float("nan")}
    _write_stage3(directory, arch, params, history, collapsed, ratio, {"kappa": str(kappa)})
    eps = cfg["evaluate"]["eps_div"]
    y = denormalize(split.hr_test, split.mean, split.std)
    m1, g1 = point_metrics(y, physical_predictions(params1, arch, split, "stage1"), eps)
    m3, g3 = point_metrics(y, physical_predictions(params, arch, split, "stage3"), eps)
    return {"kappa": kappa, "status": "collapsed" if collapsed else "ok", "collapsed": collapsed,
            "ratio": ratio, "rel_mape": float(np.median(m3 - m1)),
            "rel_grad_mape": float(np.median(g3 - g1))}


def optimal_kappa(results):
    """Smallest kappa such that it and every larger kappa avoid collapse."""
    best = None
    for r in sorted(results, key=lambda r: -r["kappa"]):
        if r["collapsed"]:
            break
        best = r["kappa"]
    return best


def cmd_sweep_kappa(ws):
    """Stage 2b plus Stage 3 (image mode, fresh from Stage 1) for each kappa."""
    _load_stage1(ws)
    _load_stage2a(ws)
    kappas = ws.cfg.kappas
    epochs = ws.cfg["sweep"]["epochs"] or None
    workers = ws.cfg["sweep"]["workers"]
    ws.sweep_dir.mkdir(parents=True, exist_ok=True)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(_sweep_one, ws.root, ws.cfg, k, epochs) for k in kappas]
            results = [f.result() for f in futures]
    else:
        results = [_sweep_one(ws.root, ws.cfg, k, epochs) for k in kappas]
    best = optimal_kappa(results)
    rows = [(r["kappa"], r["rel_mape"], r["rel_grad_mape"], r["collapsed"], r["ratio"], r["status"],
             best is not None and r["kappa"] == best) for r in results]
    report = ws.sweep_dir / "report.csv"
    write_csv(report, ["kappa", "median_rel_mape", "median_rel_grad_mape", "collapsed",
                       "spatial_variance_ratio", "status", "optimal"], rows)
    _write_json(ws.sweep_dir / "optimal.json", {"optimal_kappa": best})
    ws.record(ws.sweep_dir, "sweep-kappa", _STAGE3_KEYS,
              inputs=[ws.stage1_dir / "model.dsrt", ws.stage2a_dir / "residuals.dsrt"],
              outputs=[report, ws.sweep_dir / "optimal.json"], extra={"kappas": kappas, "epochs": epochs})
    return report, best, results


# ---------------------------------------------------------------- evaluate

def _available_models(ws):
    """``{name: (params, arch, spectra_test or None)}`` for every trained model."""
    split = load_dataset(ws)
    params1, arch = _load_stage1(ws)
    s_g = None
    if (ws.stage2a_dir / "provenance.json").exists():
        _, s_g = _load_stage2a(ws)
    models = {"bicubic": (None, arch, None), "stage1": (params1, arch, s_g)}
    if (ws.stage3_dir("global") / "provenance.json").exists():
        p, a = _load_stage3(ws, "global")
        models["stage3-global"] = (p, a, s_g)
    kappa = ws.cfg.kappa
    if (ws.stage3_dir("image", kappa) / "provenance.json").exists():
        p, a = _load_stage3(ws, "image", kappa)
        s_image = _load_stage2b(ws, kappa)
        _, s_te = _split_spectra(ws, split, s_image, s_g)
        models["stage3-image"] = (p, a, s_te)
    return split, models


def _ensemble(mu_phys, s_norm, std, n, seed, image_id):
    return SampleEnsemble.draw(mu_phys, s_norm * std ** 2, n=n, seed=seed, image_id=image_id)


def cmd_evaluate(ws):
    split, models = _available_models(ws)
    ev, seed = ws.cfg["evaluate"], ws.cfg["run"]["seed"]
    out = ws.evaluate_dir
    out.mkdir(parents=True, exist_ok=True)
    y = denormalize(split.hr_test, split.mean, split.std)
    rows_slice = []
    slice_rows = ws.cfg.slice_rows or default_slice_rows(y.shape[1])
    per_model, outputs = {}, []
    for name, (params, arch, s) in models.items():
        mu = physical_predictions(params, arch, split, name, ws.cfg["data"]["offset"])
        m, g = point_metrics(y, mu, ev["eps_div"])
        cov = np.full(len(y), np.nan)
        if s is not None:
            for i in range(len(y)):
                s_i = s if s.ndim == 2 else s[i]
                box = surface_boxplot(_ensemble(mu[i], s_i, split.std, ev["n_samples"], seed, i))
                cov[i] = coverage(y[i], box)
                if i == 0:
                    for r in slice_rows:
                        sl = slice_boxplot(box, y[i], r)
                        for col in range(y.shape[2]):
                            rows_slice.append((name, i, r, col) + tuple(sl[k][col] for k in (
                                "median", "lower", "upper", "fence_lower", "fence_upper", "target")))
        per_model[name] = (m, g, cov)
        path = out / f"metrics_{name}.csv"
        write_csv(path, ["image_id", "mape", "grad_mape", "coverage", "subregion", "time"],
                  [(i, m[i], g[i], "" if np.isnan(cov[i]) else cov[i], r, t)
                   for i, (r, t) in enumerate(split.meta_test)])
        outputs.append(path)

    base = per_model["bicubic"][0]
    others = [n for n in models if n != "bicubic"]
    path = out / "mape_vs_bicubic.csv"
    write_csv(path, ["image_id"] + [f"{n}_minus_bicubic" for n in others],
              [(i,) + tuple(per_model[n][0][i] - base[i] for n in others) for i in range(len(y))])
    outputs.append(path)
    path = out / "summary.csv"
    write_csv(path, ["model", "median_mape", "median_grad_mape", "mean_coverage"],
              [(n, float(np.median(m)), float(np.median(g)),
                "" if np.all(np.isnan(c)) else float(np.nanmean(c)))
               for n, (m, g, c) in per_model.items()])
    outputs.append(path)
    if rows_slice:
        path = out / "slices.csv"
        write_csv(path, ["model", "image_id", "row", "col", "median", "lower", "upper",
                         "fence_lower", "fence_upper", "target"], rows_slice)
        outputs.append(path)
    if models["stage1"][2] is not None:
        _spectrum_csvs(out, models["stage1"][2])
        outputs += [out / "covariance_by_separation.csv", out / "wavenumber_spectrum.csv"]
    ws.record(out, "evaluate", _STAGE3_KEYS, inputs=[ws.stage1_dir / "model.dsrt"], outputs=outputs,
              extra={"models": list(models)})
    return out, per_model


# ---------------------------------------------------------------- sample

def cmd_sample(ws, model="stage3-global", image=0, n=None):
    """Draw an ensemble for one test image and store it with its surface boxplot."""
    split, models = _available_models(ws)
    if model not in models:
        raise MissingArtifactError(f"model {model!r} has no trained checkpoint",
                                   hint=f"available: {', '.join(models)}")
    params, arch, s = models[model]
    if s is None:
        raise MissingArtifactError(f"model {model!r} has no covariance to sample from",
                                   hint="run `mdgsr stage2a` first")
    if not 0 <= image < len(split.hr_test):
        raise ConfigError(f"image {image} outside the {len(split.hr_test)} test images")
    n = n or ws.cfg["evaluate"]["n_samples"]
    mu = physical_predictions(params, arch, split, model)[image]
    s_i = s if s.ndim == 2 else s[image]
    ens = _ensemble(mu, s_i, split.std, n, ws.cfg["run"]["seed"], image)
    box = surface_boxplot(ens)
    out = ws.samples_dir
    out.mkdir(parents=True, exist_ok=True)
    stem = f"{model}_image{image}"
    write_tensor(out / f"{stem}.dsrt", ens.samples, {"model": model, "image": image, "n": n})
    stack = np.stack([box.median, box.lower, box.upper, box.fence_lower, box.fence_upper])
    write_tensor(out / f"{stem}_boxplot.dsrt", stack,
                 {"layers": ["median", "lower", "upper", "fence_lower", "fence_upper"]})
    ws.record(out, "sample", _STAGE3_KEYS, outputs=[out / f"{stem}.dsrt", out / f"{stem}_boxplot.dsrt"],
              extra={"model": model, "image": image, "n": n})
    return out / f"{stem}.dsrt"

"""Config-driven experiment runner: simulate -> separate -> evaluate, plus an
image-separation demo over user-supplied raster files.

Commands exit nonzero on failure and print a machine-readable JSON error
record to stderr.  Outputs are deterministic for a fixed (config, seed) pair;
``report.json`` in particular is byte-identical across re-runs.  Replicates
run on a bounded thread pool capped by the ``IVAKIT_THREADS`` environment
variable.
"""

from __future__ import annotations

import concurrent.futures
import csv
import functools
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from PIL import Image

from .densities import DensityModel, FastIvaNonlinearity
from .errors import ConfigError, IvakitError
from .metrics import GainMatrices, align_to_truth, isi, joint_isi
from .model import (
    DatasetCollection,
    MixingSet,
    SourceEstimates,
    UnmixingSet,
    apply_unmixing,
    center,
    compose_whitening,
    load_datasets_binary,
    save_datasets_binary,
    whiten,
)
from .optimizers import (
    IVA_G_VARIANTS,
    OptimizerConfig,
    run_auxiva,
    run_fastiva,
    run_iva_g,
    run_iva_gl,
    run_natural_gradient,
    run_newton,
)
from .objective import CostContext
from .simgen import ScvSpec, gen_mixing, gen_scv_sources, mix

ALGORITHMS = ("natural_gradient", "newton", "fastiva", "auxiva", "iva_g", "iva_gl")

_TRUTH_FILES = {
    "mixtures": "mixtures.bin",
    "sources": "sources.npy",
    "mixing": "mixing.npy",
    "covariances": "covariances.npy",
}


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlgorithmSpec:
    """Which solver to run and its algorithm-specific choices."""

    name: str
    variant: str = "newton"
    nonlinearity: str | None = None
    radial_profile: str | None = None

    def __post_init__(self):
        if self.name not in ALGORITHMS:
            raise ConfigError(
                f"unknown algorithm {self.name!r}; choose from {ALGORITHMS}"
            )
        if self.name == "fastiva" and not self.nonlinearity:
            raise ConfigError("fastiva requires a nonlinearity choice (g1..g4)")
        if self.name == "iva_g" and self.variant not in IVA_G_VARIANTS:
            raise ConfigError(
                f"unknown iva_g variant {self.variant!r}; choose from {IVA_G_VARIANTS}"
            )

    @classmethod
    def parse(cls, text: str) -> "AlgorithmSpec":
        """Parse colon syntax: ``iva_g:vector_gradient``, ``fastiva:g2``."""
        name, _, suffix = text.partition(":")
        kwargs = {}
        if name == "iva_g" and suffix:
            kwargs["variant"] = suffix
        elif name == "fastiva":
            kwargs["nonlinearity"] = suffix or None
        elif name == "auxiva":
            kwargs["radial_profile"] = suffix or "norm"
        elif suffix:
            raise ConfigError(f"algorithm {name!r} takes no {suffix!r} qualifier")
        return cls(name, **kwargs)

    def label(self) -> str:
        if self.name == "iva_g":
            return f"iva_g:{self.variant}"
        if self.name == "fastiva":
            return f"fastiva:{self.nonlinearity}"
        return self.name


@dataclass(frozen=True)
class ExperimentConfig:
    """Parsed TOML experiment file."""

    problem: ScvSpec | None
    condition_cap: float
    algorithm: AlgorithmSpec | None
    density: dict
    optimizer: OptimizerConfig
    replicates: int
    output_dir: Path
    whiten: bool

    @classmethod
    def from_toml(cls, path) -> "ExperimentConfig":
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc

        problem = None
        cap = 20.0
        if "problem" in raw:
            prob = dict(raw["problem"])
            cap = float(prob.pop("condition_cap", 20.0))
            try:
                problem = ScvSpec(**prob)
            except TypeError as exc:
                raise ConfigError(f"[problem] section: {exc}") from exc

        algorithm = None
        if "algorithm" in raw:
            alg = dict(raw["algorithm"])
            algorithm = AlgorithmSpec(
                name=alg.get("name", ""),
                variant=alg.get("variant", "newton"),
                nonlinearity=alg.get("nonlinearity"),
                radial_profile=alg.get("radial_profile"),
            )

        opt = dict(raw.get("optimizer", {}))
        try:
            optimizer = OptimizerConfig(**opt)
        except TypeError as exc:
            raise ConfigError(f"[optimizer] section: {exc}") from exc

        run = dict(raw.get("run", {}))
        replicates = int(run.get("replicates", 1))
        if replicates < 1:
            raise ConfigError("run.replicates must be positive")
        output_dir = Path(run.get("output_dir", "ivakit_out"))
        do_whiten = bool(run.get("whiten", True))
        return cls(
            problem=problem,
            condition_cap=cap,
            algorithm=algorithm,
            density=dict(raw.get("density", {})),
            optimizer=optimizer,
            replicates=replicates,
            output_dir=output_dir,
            whiten=do_whiten,
        )


def build_models(density: dict, p: int, k: int):
    """One DensityModel per SCV from a config section.

    Either a shared ``family`` (with optional scalar parameters) or a
    ``per_scv`` list of JSON-style descriptors.
    """
    if "per_scv" in density:
        descriptors = density["per_scv"]
        if len(descriptors) != p:
            raise ConfigError(
                f"density.per_scv has {len(descriptors)} entries, need p={p}"
            )
        return tuple(DensityModel.from_descriptor(d) for d in descriptors)

    family = density.get("family", "laplace")
    if family == "gaussian":
        make = lambda: DensityModel.gaussian(dim=k)
    elif family == "laplace":
        make = lambda: DensityModel.laplace(dim=k)
    elif family == "student_t":
        make = lambda: DensityModel.student_t(density.get("nu", 5.0), dim=k)
    elif family == "kotz":
        make = lambda: DensityModel.kotz(
            density.get("beta", 1.0),
            density.get("eta", 1.0),
            density.get("lam", 0.5),
            dim=k,
        )
    elif family == "mggd":
        make = lambda: DensityModel.mggd(
            density.get("alpha", 1.0), density.get("beta", 0.5), dim=k
        )
    elif family == "mixed":
        make = lambda: DensityModel.mixed(
            density.get("epsilon", 0.5),
            DensityModel.student_t(density.get("nu", 5.0), dim=k),
            DensityModel.laplace(dim=k),
        )
    elif family == "super_gaussian_radial":
        make = lambda: DensityModel.super_gaussian(
            profile=density.get("profile", "norm"), dim=k
        )
    else:
        raise ConfigError(f"unknown density family {family!r}")
    return tuple(make() for _ in range(p))


# ---------------------------------------------------------------------------
# algorithm dispatch
# ---------------------------------------------------------------------------

def run_algorithm(
    collection: DatasetCollection,
    algorithm: AlgorithmSpec,
    optimizer: OptimizerConfig,
    density: dict,
    do_whiten: bool = True,
):
    """Run one solver on raw data; returns (composed UnmixingSet, report).

    The returned unmixing maps centered raw data to source estimates (the
    whitener is folded in when whitening is active).
    """
    if algorithm.name in ("iva_g", "iva_gl"):
        if algorithm.name == "iva_g":
            return run_iva_g(collection, optimizer, algorithm.variant)
        return run_iva_gl(collection, optimizer)

    centered, _ = center(collection)
    transform = None
    if algorithm.name == "fastiva" and not do_whiten:
        raise ConfigError("fastiva requires whitening; set run.whiten = true")
    if do_whiten:
        working, transform = whiten(centered)
    else:
        working = centered
    k = collection.k_count
    p = collection.channel_count

    if algorithm.name == "auxiva":
        profile = algorithm.radial_profile or density.get("profile")
        if density.get("family", "super_gaussian_radial") != "super_gaussian_radial":
            raise ConfigError(
                "auxiva requires super_gaussian_radial source models"
            )
        if not profile:
            raise ConfigError("auxiva requires a radial profile")
        models = tuple(
            DensityModel.super_gaussian(profile=profile, dim=k) for _ in range(p)
        )
        ctx = CostContext(working, models)
        unmixing, report = run_auxiva(ctx, optimizer)
    elif algorithm.name == "fastiva":
        models = build_models(density, p, k)
        ctx = CostContext(working, models)
        g = FastIvaNonlinearity(algorithm.nonlinearity, k_count=k)
        unmixing, report = run_fastiva(ctx, optimizer, g)
    elif algorithm.name == "natural_gradient":
        models = build_models(density, p, k)
        ctx = CostContext(working, models)
        unmixing, report = run_natural_gradient(ctx, optimizer)
    else:  # newton
        models = build_models(density, p, k)
        ctx = CostContext(working, models)
        unmixing, report = run_newton(ctx, optimizer)

    if transform is not None:
        unmixing = compose_whitening(unmixing, transform)
    return unmixing, report


def replicate_seeds(master_seed: int, replicates: int) -> list:
    """Derive one 64-bit seed per replicate from the master seed.

    Uses ``np.random.SeedSequence(master).generate_state``, so any single
    replicate can be re-run in isolation from its recorded seed.
    """
    state = np.random.SeedSequence(master_seed).generate_state(
        replicates, dtype=np.uint64
    )
    return [int(s) for s in state]


def _worker_count() -> int:
    env = os.environ.get("IVAKIT_THREADS")
    if env:
        return max(1, int(env))
    return max(1, min(4, os.cpu_count() or 1))


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _trace_rows(replicate: int, report_dict: dict, label: str):
    """Rows (replicate, stage, iteration, cost, criterion) for traces.csv."""
    stages = report_dict.get("stages")
    rows = []
    if stages and all("cost_trace" in s for s in stages):
        for stage in stages:
            costs = stage["cost_trace"]
            crits = stage["criterion_trace"]
            for i, cost in enumerate(costs):
                crit = "" if i == 0 else crits[i - 1]
                rows.append((replicate, stage["name"], i, cost, crit))
    else:
        costs = report_dict["cost_trace"]
        crits = report_dict["criterion_trace"]
        for i, cost in enumerate(costs):
            crit = "" if i == 0 else crits[i - 1]
            rows.append((replicate, label, i, cost, crit))
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_simulate(config: ExperimentConfig) -> Path:
    """Generate a ground-truth bundle under ``<output_dir>/truth``."""
    if config.problem is None:
        raise ConfigError("simulate requires a [problem] section")
    spec = config.problem
    out = config.output_dir / "truth"
    out.mkdir(parents=True, exist_ok=True)

    sources, covariances = gen_scv_sources(spec)
    mixing = gen_mixing(spec.p, spec.k, config.condition_cap, spec.seed)
    mixtures = mix(sources, mixing)

    save_datasets_binary(mixtures, out / _TRUTH_FILES["mixtures"])
    np.save(out / _TRUTH_FILES["sources"], sources.scvs)
    np.save(out / _TRUTH_FILES["mixing"], mixing.matrices)
    np.save(out / _TRUTH_FILES["covariances"], covariances)
    manifest = {
        "kind": "ivakit-truth",
        "p": spec.p,
        "k": spec.k,
        "n": spec.n,
        "family": spec.family,
        "covariance_style": spec.covariance_style,
        "ar1_phi": spec.ar1_phi,
        "min_cross_correlation": spec.min_cross_correlation,
        "seed": spec.seed,
        "condition_cap": config.condition_cap,
        "files": _TRUTH_FILES,
    }
    _dump_json(manifest, out / "manifest.json")
    return out


def _load_truth(truth_dir: Path):
    manifest = json.loads((truth_dir / "manifest.json").read_text())
    if manifest.get("kind") != "ivakit-truth":
        raise ConfigError(f"{truth_dir} does not hold an ivakit truth bundle")
    files = manifest["files"]
    mixtures = load_datasets_binary(truth_dir / files["mixtures"])
    sources = SourceEstimates(np.load(truth_dir / files["sources"]))
    mixing = MixingSet(np.load(truth_dir / files["mixing"]))
    return manifest, mixtures, sources, mixing


def _separate_one(collection, config, seed):
    cfg = replace(config.optimizer, seed=seed)
    unmixing, report = run_algorithm(
        collection, config.algorithm, cfg, config.density, config.whiten
    )
    return unmixing, report


def cmd_separate(config: ExperimentConfig, data_dir: Path) -> Path:
    """Run the configured algorithm over all replicate seeds; persist every
    unmixing and convergence record under ``<output_dir>/estimates``."""
    if config.algorithm is None:
        raise ConfigError("separate requires an [algorithm] section")
    manifest_path = Path(data_dir) / "manifest.json"
    if manifest_path.exists():
        _, mixtures, _, _ = _load_truth(Path(data_dir))
    else:
        mixtures = load_datasets_binary(Path(data_dir) / "mixtures.bin")

    out = config.output_dir / "estimates"
    out.mkdir(parents=True, exist_ok=True)
    seeds = replicate_seeds(config.optimizer.seed, config.replicates)

    results = [None] * config.replicates
    with concurrent.futures.ThreadPoolExecutor(_worker_count()) as pool:
        futures = {
            pool.submit(_separate_one, mixtures, config, seeds[r]): r
            for r in range(config.replicates)
        }
        for future in concurrent.futures.as_completed(futures):
            r = futures[future]
            try:
                results[r] = ("ok", future.result())
            except IvakitError as exc:
                results[r] = ("error", (type(exc).__name__, str(exc)))

    label = config.algorithm.label()
    records = []
    trace_rows = []
    for r, (status, payload) in enumerate(results):
        if status == "error":
            records.append(
                {"replicate": r, "seed": seeds[r], "error": {"type": payload[0], "message": payload[1]}}
            )
            continue
        unmixing, report = payload
        np.save(out / f"unmixing_rep{r:03d}.npy", unmixing.matrices)
        report_dict = report.to_dict(include_wall_time=True)
        _dump_json(report_dict, out / f"convergence_rep{r:03d}.json")
        trace_rows.extend(_trace_rows(r, report_dict, label))
        records.append(
            {
                "replicate": r,
                "seed": seeds[r],
                "error": None,
                "converged": report.converged,
                "iterations_run": report.iterations_run,
                "final_cost": float(report.final_cost),
            }
        )

    with open(out / "traces.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replicate", "stage", "iteration", "cost", "criterion"])
        writer.writerows(trace_rows)

    manifest = {
        "kind": "ivakit-estimates",
        "algorithm": label,
        "density": config.density,
        "optimizer": config.optimizer.echo(),
        "whiten": config.whiten,
        "replicates": config.replicates,
        "master_seed": config.optimizer.seed,
        "seeds": seeds,
        "records": records,
    }
    _dump_json(manifest, out / "manifest.json")
    return out


def cmd_evaluate(est_dir: Path, truth_dir: Path | None, out_path: Path | None = None):
    """Score persisted unmixings against ground truth; write report.json.

    Without a truth bundle the report runs in blind mode: convergence data
    only, no jISI or alignment.
    """
    est_dir = Path(est_dir)
    est_manifest = json.loads((est_dir / "manifest.json").read_text())
    if est_manifest.get("kind") != "ivakit-estimates":
        raise ConfigError(f"{est_dir} does not hold ivakit estimates")

    truth = None
    if truth_dir is not None:
        manifest, mixtures, sources, mixing = _load_truth(Path(truth_dir))
        centered_mixtures, _ = center(mixtures)
        truth = (manifest, centered_mixtures, sources, mixing)

    per_replicate = []
    warnings = []
    jisis = []
    for record in est_manifest["records"]:
        r = record["replicate"]
        entry = {
            "replicate": r,
            "seed": record["seed"],
            "error": record.get("error"),
        }
        if record.get("error") is None:
            entry["converged"] = record["converged"]
            entry["iterations_run"] = record["iterations_run"]
            entry["final_cost"] = record["final_cost"]
            if truth is not None:
                _, centered_mixtures, sources, mixing = truth
                w = UnmixingSet(
                    np.load(est_dir / f"unmixing_rep{r:03d}.npy"),
                    composed_with_whitening=True,
                )
                if w.matrices.shape != mixing.matrices.shape:
                    raise ConfigError(
                        "estimate and truth bundles have mismatched dimensions"
                    )
                gains = GainMatrices.from_sets(w, mixing)
                jisi_val = joint_isi(gains)
                jisis.append(jisi_val)
                entry["jisi"] = jisi_val
                entry["isi_per_dataset"] = [isi(g) for g in gains.g]
                estimates = apply_unmixing(w, centered_mixtures)
                alignment, _ = align_to_truth(estimates, sources)
                entry["permutation"] = alignment.permutation.tolist()
                entry["signs"] = alignment.signs.tolist()
                if jisi_val > 0.5:
                    warnings.append(
                        f"replicate {r}: jISI {jisi_val:.3f} exceeds 0.5 "
                        "(separation likely failed or pairing is wrong)"
                    )
        per_replicate.append(entry)

    report = {
        "kind": "ivakit-report",
        "algorithm": est_manifest["algorithm"],
        "replicates": est_manifest["replicates"],
        "blind": truth is None,
        "per_replicate": per_replicate,
        "warnings": warnings,
    }
    if jisis:
        q10, q50, q90 = np.quantile(np.array(jisis), [0.1, 0.5, 0.9])
        report["aggregate"] = {
            "jisi_median": float(q50),
            "jisi_q10": float(q10),
            "jisi_q90": float(q90),
        }
    destination = Path(out_path) if out_path else est_dir / "report.json"
    _dump_json(report, destination)
    return report, destination


# ---------------------------------------------------------------------------
# image demo
# ---------------------------------------------------------------------------

def load_images_as_sources(paths):
    """Flatten raster images into SCV blocks.

    Channel c of image j becomes component c of SCV j (row-major flattening,
    intensities scaled to [0, 1]).  All images must share dimensions; RGB
    inputs give K = 3, grayscale-only inputs give K = 1.
    """
    if len(paths) < 2:
        raise ConfigError("need at least two images")
    images = []
    for path in paths:
        try:
            images.append(Image.open(path))
        except OSError as exc:
            raise ConfigError(f"{path}: unsupported or unreadable image ({exc})")
    sizes = {img.size for img in images}
    if len(sizes) != 1:
        raise ConfigError(f"images disagree in dimensions: {sorted(sizes)}")
    grayscale = all(img.mode in ("L", "1", "I", "I;16") for img in images)
    mode = "L" if grayscale else "RGB"
    channels = 1 if grayscale else 3
    width, height = images[0].size
    n = width * height
    blocks = np.empty((len(paths), channels, n))
    for j, img in enumerate(images):
        arr = np.asarray(img.convert(mode), dtype=np.float64) / 255.0
        if arr.ndim == 2:
            arr = arr[:, :, None]
        for c in range(channels):
            blocks[j, c] = arr[:, :, c].reshape(-1)
    return SourceEstimates(blocks), (width, height), mode


def render_sources(sources: SourceEstimates, size, mode):
    """Min-max rescale each channel to [0, 255] and rebuild PIL images."""
    width, height = size
    out = []
    for block in sources.scvs:
        channels = []
        for row in block:
            low, high = row.min(), row.max()
            span = high - low
            scaled = (row - low) / span if span > 0 else np.zeros_like(row)
            channels.append((scaled * 255.0).round().astype(np.uint8).reshape(height, width))
        if mode == "L":
            out.append(Image.fromarray(channels[0], "L"))
        else:
            out.append(Image.fromarray(np.stack(channels, axis=-1), "RGB"))
    return out


def cmd_image_demo(
    image_paths,
    algo: str,
    seed: int,
    out_dir: Path,
    condition_cap: float = 30.0,
    density_family: str = "laplace",
):
    """Mix user images with random matrices, separate, align, and render."""
    algorithm = AlgorithmSpec.parse(algo)
    sources, size, mode = load_images_as_sources(image_paths)
    p, k, _ = sources.scvs.shape
    mixing = gen_mixing(p, k, condition_cap, seed)
    mixtures = mix(sources, mixing)

    optimizer = OptimizerConfig(seed=seed)
    unmixing, report = run_algorithm(
        mixtures, algorithm, optimizer, {"family": density_family}, True
    )

    gains = GainMatrices.from_sets(unmixing, mixing)
    jisi_val = joint_isi(gains)
    centered, _ = center(mixtures)
    estimates = apply_unmixing(unmixing, centered)
    alignment, aligned = align_to_truth(estimates, sources)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    mixed_blocks = SourceEstimates(
        np.ascontiguousarray(mixtures.data.transpose(1, 0, 2))
    )
    for j, img in enumerate(render_sources(mixed_blocks, size, mode)):
        img.save(out_dir / f"mixed_{j:02d}.png")
    for j, img in enumerate(render_sources(aligned, size, mode)):
        img.save(out_dir / f"separated_{j:02d}.png")

    demo_report = {
        "kind": "ivakit-image-demo",
        "algorithm": algorithm.label(),
        "seed": seed,
        "images": [str(p) for p in image_paths],
        "width": size[0],
        "height": size[1],
        "channels": k,
        "jisi": jisi_val,
        "permutation": alignment.permutation.tolist(),
        "signs": alignment.signs.tolist(),
        "converged": report.converged,
        "iterations_run": report.iterations_run,
    }
    _dump_json(demo_report, out_dir / "report.json")
    return demo_report


# ---------------------------------------------------------------------------
# click surface
# ---------------------------------------------------------------------------

def _guard(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (IvakitError, OSError, ValueError, KeyError) as exc:
            record = {"error": type(exc).__name__, "message": str(exc)}
            click.echo(json.dumps(record, sort_keys=True), err=True)
            sys.exit(1)

    return wrapper


@click.group()
def main():
    """Joint blind source separation toolkit."""


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@_guard
def simulate(config_path):
    """Generate a synthetic ground-truth bundle."""
    config = ExperimentConfig.from_toml(config_path)
    out = cmd_simulate(config)
    click.echo(str(out))


@main.command()
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@_guard
def separate(config_path, data_dir):
    """Run the configured algorithm over replicate seeds."""
    config = ExperimentConfig.from_toml(config_path)
    out = cmd_separate(config, Path(data_dir))
    click.echo(str(out))


@main.command()
@click.option("--est", "est_dir", required=True, type=click.Path())
@click.option("--truth", "truth_dir", default=None, type=click.Path())
@click.option("--out", "out_path", default=None, type=click.Path())
@_guard
def evaluate(est_dir, truth_dir, out_path):
    """Score estimates against ground truth (blind mode without --truth)."""
    _, destination = cmd_evaluate(
        Path(est_dir),
        Path(truth_dir) if truth_dir else None,
        Path(out_path) if out_path else None,
    )
    click.echo(str(destination))


@main.command("image-demo")
@click.option(
    "--images", "image_paths", required=True, multiple=True, type=click.Path()
)
@click.option("--algo", default="iva_g:newton")
@click.option("--seed", default=0, type=int)
@click.option("--out", "out_dir", default="image_demo_out", type=click.Path())
@click.option("--condition-cap", default=30.0, type=float)
@click.option("--density", "density_family", default="laplace")
@_guard
def image_demo(image_paths, algo, seed, out_dir, condition_cap, density_family):
    """Mix, separate, and render user-supplied raster images."""
    report = cmd_image_demo(
        list(image_paths), algo, seed, Path(out_dir), condition_cap, density_family
    )
    click.echo(json.dumps({"jisi": report["jisi"]}, sort_keys=True))


if __name__ == "__main__":
    main()

"""End-to-end experiment orchestration and command-line interface.

One JSON config drives the whole pipeline: phantom population, projection
grid, encoder, triplet training, holdout evaluation.  Stages write their
artifacts into a workspace directory and can run individually as
subcommands or all at once with ``run``.  All randomness flows from named
seeds in the config; reruns are numerically identical.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import drr, encoder as enc, fingerprint as fp, mesh as msh, phantom, triplet as tpl

log = logging.getLogger("osteoprint")

REPORT_NAME = "report.json"
METRICS_NAME = "report.csv"
MODEL_NAME = "model.ostm"
HISTORY_NAME = "history.csv"
STORE_NAME = "store.csv"


class ConfigError(ValueError):
    """Malformed experiment configuration (unknown keys fail fast)."""


class StageError(RuntimeError):
    """A pipeline stage failed; partial artifacts are retained."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed: {cause}")


def _take(d: dict, context: str):
    def pop(key, default):
        return d.pop(key, default)
    def done():
        if d:
            raise ConfigError(f"unknown keys in {context}: {sorted(d)}")
    return pop, done


@dataclass(frozen=True)
class PopulationConfig:
    n: int = 12
    seed: int = 11
    variation: float = 0.1
    dims: tuple[int, int, int] = (64, 64, 160)
    spacing: tuple[float, float, float] = (0.5, 0.5, 0.5)
    base: phantom.PhantomParams = field(default_factory=phantom.PhantomParams)

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationConfig":
        pop, done = _take(dict(d), "population")
        base_dict = pop("base", None)
        defaults = cls()
        out = cls(
            n=int(pop("n", defaults.n)),
            seed=int(pop("seed", defaults.seed)),
            variation=float(pop("variation", defaults.variation)),
            dims=tuple(pop("dims", defaults.dims)),
            spacing=tuple(pop("spacing", defaults.spacing)),
            base=phantom.PhantomParams.from_dict(base_dict) if base_dict
            else phantom.PhantomParams(),
        )
        done()
        return out


@dataclass(frozen=True)
class EncoderConfig:
    d: int = 32
    channels: tuple[int, ...] = (8, 16, 32)
    fc_widths: tuple[int, int] = (256, 128)
    first_stride: int = 2
    seed: int = 5

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        pop, done = _take(dict(d), "encoder")
        defaults = cls()
        out = cls(
            d=int(pop("d", defaults.d)),
            channels=tuple(pop("channels", defaults.channels)),
            fc_widths=tuple(pop("fc_widths", defaults.fc_widths)),
            first_stride=int(pop("first_stride", defaults.first_stride)),
            seed=int(pop("seed", defaults.seed)),
        )
        done()
        return out


def _grid_from_dict(d: dict) -> drr.GridConfig:
    pop, done = _take(dict(d), "grid")
    defaults = DESK_GRID
    out = drr.GridConfig(
        rx_interval=tuple(pop("rx_interval", defaults.rx_interval)),
        rx_step=float(pop("rx_step", defaults.rx_step)),
        ry_interval=tuple(pop("ry_interval", defaults.ry_interval)),
        ry_step=float(pop("ry_step", defaults.ry_step)),
        energy_interval=tuple(pop("energy_interval", defaults.energy_interval)),
        energy_step=float(pop("energy_step", defaults.energy_step)),
        resolution=tuple(pop("resolution", defaults.resolution)),
        blur_sigma=float(pop("blur_sigma", defaults.blur_sigma)),
        i0=float(pop("i0", defaults.i0)),
    )
    done()
    return out


def _training_from_dict(d: dict) -> tpl.TripletLossConfig:
    pop, done = _take(dict(d), "training")
    defaults = DESK_TRAINING
    out = tpl.TripletLossConfig(
        margin=float(pop("margin", defaults.margin)),
        squared=bool(pop("squared", defaults.squared)),
        batch_size=int(pop("batch_size", defaults.batch_size)),
        epochs=int(pop("epochs", defaults.epochs)),
        learning_rate=float(pop("learning_rate", defaults.learning_rate)),
        seed=int(pop("seed", defaults.seed)),
    )
    done()
    return out


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationConfig = field(default_factory=PopulationConfig)
    grid: drr.GridConfig = field(default_factory=lambda: DESK_GRID)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: tpl.TripletLossConfig = field(default_factory=lambda: DESK_TRAINING)
    holdout: tuple[int, ...] = (9, 10, 11)
    knn_k: int = 1
    separation_presets: tuple[str, ...] = ("narrow_energy_4deg", "full")
    separation_threshold: float | None = None  # defaults to the margin
    validation_triplets: int = 2000
    eval_samples: int = 20_000
    eval_seed: int = 3
    align_samples: int = 2000
    iso_value: float = 0.06
    threads: int | None = None

    def validate(self) -> None:
        ids = set(range(self.population.n))
        if not set(self.holdout) <= ids:
            raise ConfigError(f"holdout ids {self.holdout} outside population {ids}")
        if len(ids - set(self.holdout)) < 2:
            raise ConfigError("need at least 2 training specimens")
        if self.encoder.d not in enc.STANDARD_DIMS:
            raise ConfigError(f"embedding dim {self.encoder.d} not in {enc.STANDARD_DIMS}")
        for preset in self.separation_presets:
            if preset not in fp.FILTER_PRESETS:
                raise ConfigError(f"unknown separation preset {preset!r}")
        self.grid.validate()
        self.training.validate()

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        pop, done = _take(dict(d), "config")
        defaults = cls()
        out = cls(
            population=PopulationConfig.from_dict(pop("population", {})),
            grid=_grid_from_dict(pop("grid", {})),
            encoder=EncoderConfig.from_dict(pop("encoder", {})),
            training=_training_from_dict(pop("training", {})),
            holdout=tuple(pop("holdout", defaults.holdout)),
            knn_k=int(pop("knn_k", defaults.knn_k)),
            separation_presets=tuple(pop("separation_presets",
                                         defaults.separation_presets)),
            separation_threshold=pop("separation_threshold", None),
            validation_triplets=int(pop("validation_triplets",
                                        defaults.validation_triplets)),
            eval_samples=int(pop("eval_samples", defaults.eval_samples)),
            eval_seed=int(pop("eval_seed", defaults.eval_seed)),
            align_samples=int(pop("align_samples", defaults.align_samples)),
            iso_value=float(pop("iso_value", defaults.iso_value)),
            threads=pop("threads", None),
        )
        done()
        out.validate()
        return out

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["population"]["base"] = self.population.base.to_dict()
        return json.loads(json.dumps(d))  # tuples -> lists for JSON stability


# Desk-scale defaults: 12 phantoms, 100 images each, moderate pose range
# sampled at the full grid's 3-degree pitch.
DESK_GRID = drr.GridConfig(
    rx_interval=(85.0, 97.0), rx_step=3.0,
    ry_interval=(-5.5, 6.5), ry_step=3.0,
    energy_interval=(140.0, 161.0), energy_step=6.0,
    resolution=(64, 128), blur_sigma=1.0, i0=1.0,
)
DESK_TRAINING = tpl.TripletLossConfig(margin=0.1, squared=True, batch_size=32,
                                      epochs=15, learning_rate=7e-4, seed=7)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


# ---------------------------------------------------------------------------
# Pipeline workspace
# ---------------------------------------------------------------------------

def _fit_validation_split(rows: list[dict]):
    """Even image ids anchor the reference half; odd ids are validated."""
    fit = [r for r in rows if r["image_id"] % 2 == 0]
    val = [r for r in rows if r["image_id"] % 2 == 1]
    return fit, val


class Pipeline:
    """Stage runner bound to one config and workspace directory."""

    def __init__(self, config: ExperimentConfig, out_dir):
        config.validate()
        self.config = config
        self.out = Path(out_dir)
        self.volumes_dir = self.out / "volumes"
        self.images_dir = self.out / "images"
        self.meshes_dir = self.out / "meshes"
        self.checkpoints_dir = self.out / "checkpoints"
        self.runtimes: dict[str, float] = {}

    def _stage(self, name):
        class _Timer:
            def __init__(timer):
                timer.t0 = None
            def __enter__(timer):
                log.info("stage %s ...", name)
                timer.t0 = time.perf_counter()
            def __exit__(timer, exc_type, exc, tb):
                self.runtimes[name] = time.perf_counter() - timer.t0
                if exc is not None and not isinstance(exc, StageError):
                    raise StageError(name, exc) from exc
        return _Timer()

    # -- stages -------------------------------------------------------------

    def stage_phantom(self) -> list[phantom.SpecimenRecord]:
        with self._stage("phantom"):
            cfg = self.config.population
            records = phantom.generate_population(
                cfg.n, cfg.seed, cfg.base, cfg.variation, cfg.dims, cfg.spacing)
            phantom.save_population(records, self.volumes_dir)
            return records

    def _load_population(self):
        return phantom.load_population(self.volumes_dir / "population.jsonl")

    def stage_render(self, records=None) -> list[dict]:
        with self._stage("render"):
            records = records or self._load_population()
            return drr.render_dataset(records, self.config.grid, self.images_dir,
                                      threads=self.config.threads)

    def _load_manifest(self):
        return drr.load_dataset_manifest(self.images_dir / drr.MANIFEST_NAME)

    def _training_rows(self, manifest):
        holdout = set(self.config.holdout)
        train_specimens = [r for r in manifest if r["specimen_id"] not in holdout]
        fit, _ = _fit_validation_split(train_specimens)
        return fit

    def stage_train(self, manifest=None) -> enc.EncoderModel:
        with self._stage("train"):
            manifest = manifest or self._load_manifest()
            rows = self._training_rows(manifest)
            w, h = self.config.grid.resolution
            spec = enc.default_encoder_spec(
                (h, 2 * w), d=self.config.encoder.d,
                channels=self.config.encoder.channels,
                fc_widths=self.config.encoder.fc_widths,
                first_stride=self.config.encoder.first_stride)
            model = enc.init_model(spec, self.config.encoder.seed)
            self.checkpoints_dir.mkdir(parents=True, exist_ok=True)
            images = drr.load_manifest_images(rows, self.images_dir)
            model, history = tpl.train(model, rows, self.config.training,
                                       images=images,
                                       checkpoint_dir=self.checkpoints_dir)
            holdout = set(self.config.holdout)
            trained_on = {sid for sid, _ in history.used_images}
            if trained_on & holdout:
                raise RuntimeError(f"holdout specimens {trained_on & holdout} "
                                   "leaked into training batches")
            enc.persist_model(model, self.out / MODEL_NAME)
            history.save(self.out / HISTORY_NAME)
            return model

    def stage_embed(self, manifest=None, model=None) -> fp.EmbeddingStore:
        with self._stage("embed"):
            manifest = manifest or self._load_manifest()
            model = model or enc.load_model(self.out / MODEL_NAME)
            store = fp.embed_images(model, manifest, image_dir=self.images_dir)
            store.save(self.out / STORE_NAME)
            return store

    def _knn_accuracy(self, fit_store, query_store) -> float:
        correct = 0
        for i in range(len(query_store)):
            predicted = fp.knn_classify(fit_store, query_store.embeddings[i],
                                        k=self.config.knn_k)
            correct += predicted == int(query_store.specimen_ids[i])
        return correct / len(query_store)

    def stage_classify(self, store=None) -> dict:
        """kNN accuracies and validation triplet accuracy from the store."""
        with self._stage("classify"):
            store = store or fp.EmbeddingStore.load(self.out / STORE_NAME)
            holdout = set(self.config.holdout)
            is_holdout = np.isin(store.specimen_ids, sorted(holdout))
            even = store.image_ids % 2 == 0

            train_fit = store.subset(~is_holdout & even)
            train_val = store.subset(~is_holdout & ~even)
            hold_fit = store.subset(is_holdout & even)
            hold_val = store.subset(is_holdout & ~even)

            knn_training = self._knn_accuracy(train_fit, train_val)
            knn_holdout = self._knn_accuracy(hold_fit, hold_val)

            # triplet accuracy over triplets sampled from the validation half
            val_rows = [{"specimen_id": int(s), "image_id": int(i)}
                        for s, i in zip(train_val.specimen_ids, train_val.image_ids)]
            triplets = tpl.sample_triplet_batch(
                val_rows, self.config.validation_triplets, rng=self.config.eval_seed)
            idx = np.array([[t.anchor, t.positive, t.negative] for t in triplets])
            emb = train_val.embeddings.astype(np.float64)
            val_acc = tpl.triplet_accuracy(emb[idx[:, 0]], emb[idx[:, 1]],
                                           emb[idx[:, 2]], self.config.training.margin)
            return {
                "triplet_accuracy_validation": float(val_acc),
                "knn_training_accuracy": float(knn_training),
                "knn_holdout_accuracy": float(knn_holdout),
            }

    def stage_pairs(self, store=None) -> dict:
        with self._stage("pairs"):
            store = store or fp.EmbeddingStore.load(self.out / STORE_NAME)
            holdout_store = store.subset(
                np.isin(store.specimen_ids, sorted(set(self.config.holdout))))
            threshold = (self.config.separation_threshold
                         if self.config.separation_threshold is not None
                         else self.config.training.margin)
            reports = {}
            for preset in self.config.separation_presets:
                report = fp.pairwise_separation(holdout_store, threshold,
                                                fp.FILTER_PRESETS[preset])
                report.save(self.out / f"separation_{preset}.json")
                reports[preset] = report
            return reports

    def stage_meshes(self, records=None) -> dict[int, msh.TriMesh]:
        with self._stage("meshes"):
            records = records or self._load_population()
            self.meshes_dir.mkdir(parents=True, exist_ok=True)
            catalog = {}
            for rec in records:
                mesh = msh.extract_isosurface(rec.volume, self.config.iso_value)
                msh.save_stl(mesh, self.meshes_dir / f"specimen_{rec.specimen_id:03d}.stl")
                catalog[rec.specimen_id] = mesh
            return catalog

    def stage_estimate(self, store=None, catalog=None) -> list[dict]:
        """Per-holdout shape estimation, distance evaluation and rank."""
        with self._stage("estimate"):
            store = store or fp.EmbeddingStore.load(self.out / STORE_NAME)
            catalog = catalog or self._load_meshes()
            holdout = sorted(set(self.config.holdout))
            training_ids = [sid for sid in sorted(catalog) if sid not in holdout]
            fit_store = store.subset(~np.isin(store.specimen_ids, holdout))
            candidates = {sid: catalog[sid] for sid in training_ids}

            evaluations = []
            for sid in holdout:
                rows = store.subset(store.specimen_ids == sid)
                votes = [fp.knn_classify(fit_store, rows.embeddings[i],
                                         k=self.config.knn_k)
                         for i in range(len(rows))]
                values, counts = np.unique(votes, return_counts=True)
                predicted = int(values[np.argmax(counts)])

                truth = catalog[sid]
                aligned = msh.rigid_align(candidates[predicted], truth,
                                          samples=self.config.align_samples,
                                          seed=self.config.eval_seed).aligned
                report = msh.mesh_distance(aligned, truth, n=self.config.eval_samples,
                                           seed=self.config.eval_seed)
                report.save(self.out / f"holdout_{sid:03d}_distance.json")
                rank = fp.better_match_rank(truth, predicted, candidates,
                                            samples=self.config.eval_samples,
                                            seed=self.config.eval_seed)
                evaluations.append({
                    "specimen_id": sid,
                    "predicted_id": predicted,
                    "better_match_rank": rank,
                    "distance": report.to_dict(),
                })
            return evaluations

    def _load_meshes(self) -> dict[int, msh.TriMesh]:
        catalog = {}
        for path in sorted(self.meshes_dir.glob("specimen_*.stl")):
            sid = int(path.stem.split("_")[1])
            catalog[sid] = msh.load_stl(path)
        if not catalog:
            raise FileNotFoundError(f"no meshes in {self.meshes_dir}")
        return catalog


def run_pipeline(config: ExperimentConfig, out_dir) -> dict:
    """Execute every stage and write report.json plus the headline CSV."""
    pipe = Pipeline(config, out_dir)
    records = pipe.stage_phantom()
    manifest = pipe.stage_render(records)
    model = pipe.stage_train(manifest)
    store = pipe.stage_embed(manifest, model)
    metrics = pipe.stage_classify(store)
    separation = pipe.stage_pairs(store)
    catalog = pipe.stage_meshes(records)
    evaluations = pipe.stage_estimate(store, catalog)

    report = {
        "config": config.to_dict(),
        "metrics": metrics,
        "separation": {name: rep.to_dict() for name, rep in separation.items()},
        "holdout_evaluations": evaluations,
        "runtimes_s": {k: round(v, 3) for k, v in pipe.runtimes.items()},
    }
    with open(Path(out_dir) / REPORT_NAME, "w") as f:
        json.dump(report, f, indent=2)
        f.write("\n")
    _write_headline_csv(report, Path(out_dir) / METRICS_NAME)
    return report


def _write_headline_csv(report: dict, path) -> None:
    rows = [("triplet_accuracy_validation",
             report["metrics"]["triplet_accuracy_validation"]),
            ("knn_training_accuracy", report["metrics"]["knn_training_accuracy"]),
            ("knn_holdout_accuracy", report["metrics"]["knn_holdout_accuracy"])]
    for preset, rep in report["separation"].items():
        rows.append((f"separation_{preset}", rep["accuracy"]))
    evals = report["holdout_evaluations"]
    if evals:
        rows.append(("mean_better_match_rank",
                     float(np.mean([e["better_match_rank"] for e in evals]))))
        rows.append(("mean_rms_mm",
                     float(np.mean([e["distance"]["rms_mm"] for e in evals]))))
        rows.append(("mean_hausdorff_mm",
                     float(np.mean([e["distance"]["hausdorff_mm"] for e in evals]))))
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)


def evaluate_report(pred_mesh_path, truth_mesh_path, samples: int = 100_000,
                    seed: int = 0) -> msh.DistanceReport:
    """Align two STL meshes and report their distances (Table-style output)."""
    pred = msh.load_stl(pred_mesh_path)
    truth = msh.load_stl(truth_mesh_path)
    aligned = msh.rigid_align(pred, truth).aligned
    report = msh.mesh_distance(aligned, truth, n=samples, seed=seed)
    print(f"rms_mm={report.rms_mm:.2f} hausdorff_mm={report.hausdorff_mm:.2f} "
          f"rms_relative={report.rms_relative:.4f} "
          f"hausdorff_relative={report.hausdorff_relative:.4f}")
    return report


# ---------------------------------------------------------------------------
# Command line
# ---------------------------------------------------------------------------

def _load_config(args) -> ExperimentConfig:
    if args.config:
        return ExperimentConfig.from_json(args.config)
    return default_config()


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = argparse.ArgumentParser(
        prog="osteoprint",
        description="Shape retrieval for long-bone phantoms from 2D projections")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_workspace_command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None,
                       help="experiment config JSON (defaults to the desk config)")
        p.add_argument("--out", type=Path, required=True, help="workspace directory")
        return p

    add_workspace_command("phantom", "generate the phantom population")
    add_workspace_command("render", "render the 2D projection dataset")
    add_workspace_command("train", "train the triplet encoder")
    add_workspace_command("embed", "embed every dataset image")
    add_workspace_command("classify", "kNN and triplet validation metrics")
    add_workspace_command("pairs", "pairwise separation reports")
    add_workspace_command("estimate", "holdout shape estimation and ranks")
    add_workspace_command("run", "run the full pipeline")

    p_eval = sub.add_parser("evaluate", help="align and compare two STL meshes")
    p_eval.add_argument("--pred", type=Path, required=True)
    p_eval.add_argument("--truth", type=Path, required=True)
    p_eval.add_argument("--samples", type=int, default=100_000)
    p_eval.add_argument("--seed", type=int, default=0)

    args = parser.parse_args(argv)
    try:
        if args.command == "evaluate":
            evaluate_report(args.pred, args.truth, args.samples, args.seed)
            return 0
        config = _load_config(args)
        if args.command == "run":
            report = run_pipeline(config, args.out)
            for key, value in report["metrics"].items():
                print(f"{key}: {value:.4f}")
            return 0
        pipe = Pipeline(config, args.out)
        if args.command == "phantom":
            pipe.stage_phantom()
        elif args.command == "render":
            pipe.stage_render()
        elif args.command == "train":
            pipe.stage_train()
        elif args.command == "embed":
            pipe.stage_embed()
        elif args.command == "classify":
            metrics = pipe.stage_classify()
            for key, value in metrics.items():
                print(f"{key}: {value:.4f}")
        elif args.command == "pairs":
            for preset, report in pipe.stage_pairs().items():
                print(f"separation_{preset}: {report.accuracy:.4f}")
        elif args.command == "estimate":
            pipe.stage_meshes()
            for ev in pipe.stage_estimate():
                print(f"specimen {ev['specimen_id']}: predicted {ev['predicted_id']} "
                      f"rank {ev['better_match_rank']} "
                      f"rms {ev['distance']['rms_mm']:.2f} mm")
        return 0
    except Exception as err:  # CLI boundary: report and signal failure
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())

"""
PlannerPipeline
Orchestrates scene sets, two-stage training, evaluation, sweeps, repair checks and plots.
"""

import copy
import csv
import functools
import json
import logging
import math
import os
import statistics
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from . import plots
from . import tensor as T
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .codec import TrajectoryCodec
from .config import RunConfig, config_hash
from .diffusion import (corrupt, make_schedule, outlier_corruption, refine, refine_loss, refine_sft_pair, sample,
                        sft_loss)
from .models import (ConfigError, EvalReport, InfeasibleSceneError, MaskplanError, ModelError, RepairCase,
                     RepairReport, RewardBreakdown, Scene, SceneResult, TokenSequence)
from .planner import ExpertId, PlannerModel
from .rft import GENERATION_LABELS, REFINEMENT_LABELS, RftTrainer, TokenScorer
from .sim import DIFFICULTIES, expected_waypoints, expert_plan, generate_scene, load_scenes, save_scenes
from .tensor import AdamW, AdamWConfig

logger = logging.getLogger(__name__)

HOLDOUT_SEED_OFFSET = 1_000_000
SFT_COLUMNS = ["epoch", "lr", "sft_loss", "refine_loss"]
RFT_COLUMNS = ["step", "epoch", "mean_r", "mean_r_refined", "clip_frac", "kl", "grpo_loss", "hybrid_loss"]
SWEEP_COLUMNS = ["steps", "pdms", "best_of_k", "latency_ms"]
SCENE_COLUMNS = ["seed", "difficulty", "nc", "dac", "ttc", "comfort", "ep", "pdms", "best_of_k"]


def _guarded(action: str):
    """Re-raise package errors; wrap anything else into MaskplanError."""
    def decorate(method):
        @functools.wraps(method)
        def wrapper(*args, **kwargs):
            try:
                return method(*args, **kwargs)
            except MaskplanError:
                raise
            except Exception as e:
                raise MaskplanError(f"{action} failed: {str(e)}")
        return wrapper
    return decorate


@dataclass
class TrainingExample:
    scene: Scene
    context: TokenSequence
    target: np.ndarray


def cosine_lr(epoch: int, epochs: int, lr: float, min_lr: float, warmup: int) -> float:
    """Linear warmup, then cosine decay from lr to min_lr."""
    if warmup > 0 and epoch < warmup:
        return lr * (epoch + 1) / warmup
    span = max(epochs - warmup, 1)
    progress = min(max(epoch - warmup, 0) / span, 1.0)
    return min_lr + 0.5 * (lr - min_lr) * (1.0 + math.cos(math.pi * progress))


def best_checkpoint_path(path: str) -> str:
    root, ext = os.path.splitext(path)
    return f"{root}.best{ext or '.ckpt'}"


def _metadata_line(digest: str) -> str:
    return f"# config_hash={digest}\n"


class _CsvLog:
    """Append-only CSV writer; a new file starts with a config-hash line and the header."""

    def __init__(self, path: str, columns: Sequence[str], digest: str, append: bool = False):
        self.path = path
        self.columns = list(columns)
        if not append or not os.path.exists(path):
            with open(path, "w", newline="", encoding="utf-8") as f:
                f.write(_metadata_line(digest))
                csv.writer(f).writerow(self.columns)

    def write(self, row: Dict[str, object]) -> None:
        with open(self.path, "a", newline="", encoding="utf-8") as f:
            csv.DictWriter(f, fieldnames=self.columns, extrasaction="ignore").writerow(row)


class PlannerPipeline:
    """
    Front door for every stage of a run.

    Each public method maps to one CLI subcommand and is reproducible from
    the pipeline's RunConfig and its seed.
    """

    def __init__(self, config: Optional[RunConfig] = None, show_progress: bool = True):
        self.config = (config or RunConfig()).resolve()
        self.codec = TrajectoryCodec(self.config.codec)
        self.scorer = TokenScorer(self.codec, self.config.sim)
        self.show_progress = show_progress

    # -- helpers ------------------------------------------------------------

    @property
    def horizon(self) -> float:
        return self.config.codec.waypoints * self.config.codec.dt

    def _progress(self, iterable, **kwargs):
        return tqdm(iterable, disable=not self.show_progress, **kwargs)

    def _output(self, path: str) -> str:
        if os.path.dirname(path) or os.path.isabs(path):
            parent = os.path.dirname(path)
            if parent:
                os.makedirs(parent, exist_ok=True)
            return path
        os.makedirs(self.config.output_dir, exist_ok=True)
        return os.path.join(self.config.output_dir, path)

    def _check_codec(self, ckpt: Checkpoint) -> None:
        if ckpt.config.codec != self.config.codec:
            raise ConfigError("Checkpoint was trained with a different codec layout")

    def build_examples(self, scenes: Sequence[Scene]) -> List[TrainingExample]:
        """(scene -> raster context, expert plan -> tokens) pairs; infeasible scenes are skipped."""
        examples = []
        dt = self.config.codec.dt
        for scene in scenes:
            if expected_waypoints(scene, dt) != self.config.codec.waypoints:
                logger.warning("Skipping scene %d: horizon %.1fs does not match %d waypoints",
                               scene.seed, scene.horizon, self.config.codec.waypoints)
                continue
            try:
                trajectory = expert_plan(scene, self.config.sim, dt=dt)
            except InfeasibleSceneError as e:
                logger.warning("Skipping scene %d: %s", scene.seed, e.message)
                continue
            target = np.asarray(self.codec.encode_trajectory(trajectory), dtype=np.int64)
            examples.append(TrainingExample(scene, self.scorer.context(scene), target))
        return examples

    # -- gen-scenes ---------------------------------------------------------

    @_guarded("Scene generation")
    def gen_scenes(self, count: int, difficulty: str, seed: int, out_path: str,
                   split: str = "train", force: bool = False) -> str:
        """Write ``count`` scenes; holdout seeds live in a range disjoint from train seeds."""
        if count < 0:
            raise ConfigError("count must be non-negative")
        if split not in ("train", "holdout"):
            raise ConfigError(f"Unknown split: {split}")
        if seed < 0 or seed + count > HOLDOUT_SEED_OFFSET:
            raise ConfigError(f"Scene seeds must lie in [0, {HOLDOUT_SEED_OFFSET})")
        if difficulty not in DIFFICULTIES + ("mixed",):
            raise ConfigError(f"Unknown difficulty: {difficulty}")
        base = seed + (HOLDOUT_SEED_OFFSET if split == "holdout" else 0)
        path = self._output(out_path)

        def scenes():
            for index in self._progress(range(count), desc="scenes", unit="scene"):
                level = DIFFICULTIES[index % 3] if difficulty == "mixed" else difficulty
                yield generate_scene(base + index, level, self.config.sim, horizon=self.horizon,
                                     dt=self.config.codec.dt)

        written = save_scenes(path, scenes(), force=force)
        logger.info("Wrote %d %s scenes to %s", written, difficulty, path)
        return path

    # -- sft ------------------------------------------------------------------

    def _new_model(self) -> Tuple[PlannerModel, AdamW]:
        model = PlannerModel(self.config.model, seed=self.config.seed)
        if self.config.model.n_expert_blocks > 0:
            model.init_refinement_from_generation()
        sft = self.config.sft
        optimizer = AdamW(AdamWConfig(beta1=sft.beta1, beta2=sft.beta2, eps=sft.eps,
                                      weight_decay=sft.weight_decay))
        return model, optimizer

    def _refinement_input(self, model: PlannerModel, example: TrainingExample, epoch: int,
                          rng: np.random.Generator) -> np.ndarray:
        cfg = self.config
        if epoch >= cfg.sft.warmup_epochs and rng.random() < cfg.diffusion.model_generated_fraction:
            schedule = make_schedule(cfg.diffusion.steps, cfg.codec.response_len, cfg.diffusion.schedule)
            return sample(example.context, model, schedule, cfg.diffusion.temperature, rng).tokens
        noisy, _ = refine_sft_pair(example.target, rng, cfg.diffusion.refine_corruption, self.codec)
        return noisy

    def sft_epoch(self, model: PlannerModel, optimizer: AdamW, examples: Sequence[TrainingExample],
                  epoch: int) -> Dict[str, float]:
        """One pass: masked-diffusion loss on the generation branch, full CE on the refinement branch."""
        cfg = self.config
        rng = np.random.default_rng([cfg.seed, epoch])
        lr = cosine_lr(epoch, cfg.sft.epochs, cfg.sft.lr, cfg.sft.min_lr, cfg.sft.warmup_epochs)
        partition = model.parameter_partition()
        order = rng.permutation(len(examples))
        gen_losses, ref_losses = [], []
        for start in range(0, len(order), cfg.sft.batch_size):
            batch = [examples[i] for i in order[start:start + cfg.sft.batch_size]]
            terms = []
            for example in batch:
                t = 1.0 - rng.random()
                r_t = corrupt(example.target, t, rng)
                logits = model.forward(example.context.with_response(r_t), ExpertId.GENERATION)
                terms.append(sft_loss(logits, example.target, r_t, t))
            loss = T.scale(T.add_n(terms), 1.0 / len(batch))
            T.backward(loss)
            optimizer.optimizer_step(model.params, partition, GENERATION_LABELS, lr)
            gen_losses.append(loss.item())

            if model.has_refinement:
                terms = []
                for example in batch:
                    noisy = self._refinement_input(model, example, epoch, rng)
                    logits = model.forward(example.context.with_response(noisy), ExpertId.REFINEMENT)
                    terms.append(refine_loss(logits, example.target))
                loss = T.scale(T.add_n(terms), 1.0 / len(batch))
                T.backward(loss)
                optimizer.optimizer_step(model.params, partition, REFINEMENT_LABELS, lr)
                ref_losses.append(loss.item())
        return {"epoch": epoch, "lr": lr, "sft_loss": float(np.mean(gen_losses)),
                "refine_loss": float(np.mean(ref_losses)) if ref_losses else math.nan}

    @_guarded("SFT")
    def sft(self, scenes_path: str, out_ckpt: str, resume: Optional[str] = None,
            stop_after: Optional[int] = None) -> str:
        """Supervised stage; ``stop_after`` ends this invocation early so it can be resumed."""
        examples = self.build_examples(load_scenes(scenes_path))
        if not examples:
            raise MaskplanError(f"No usable scenes in {scenes_path}")
        start = 0
        if resume:
            ckpt = load_checkpoint(resume)
            self._check_codec(ckpt)
            model, optimizer = ckpt.model, ckpt.optimizer
            start = int(ckpt.progress.get("epoch", 0))
            logger.info("Resuming SFT from %s at epoch %d", resume, start)
        else:
            model, optimizer = self._new_model()
        path = self._output(out_ckpt)
        log = _CsvLog(os.path.splitext(path)[0] + ".sft.csv", SFT_COLUMNS, config_hash(self.config),
                      append=bool(resume))
        end = self.config.sft.epochs if stop_after is None else min(self.config.sft.epochs, start + stop_after)
        for epoch in self._progress(range(start, end), desc="sft", unit="epoch"):
            row = self.sft_epoch(model, optimizer, examples, epoch)
            log.write(row)
            logger.info("epoch %d lr %.2e sft_loss %.4f refine_loss %.4f",
                        epoch, row["lr"], row["sft_loss"], row["refine_loss"])
            save_checkpoint(path, model, optimizer, self.config, {"stage": "sft", "epoch": epoch + 1})
        if start >= end:
            save_checkpoint(path, model, optimizer, self.config, {"stage": "sft", "epoch": start})
        return path

    # -- rft ------------------------------------------------------------------

    @_guarded("RFT")
    def rft(self, sft_ckpt: str, scenes_path: str, out_ckpt: str) -> str:
        """Iterate synchronized generator/refiner updates; keep final and best checkpoints."""
        ckpt = load_checkpoint(sft_ckpt)
        self._check_codec(ckpt)
        cfg = self.config
        scenes = load_scenes(scenes_path)
        if not scenes:
            raise MaskplanError(f"No scenes in {scenes_path}")
        trainer = RftTrainer(ckpt.model, cfg.rft, self.scorer, optimizer=ckpt.optimizer,
                             schedule_kind=cfg.diffusion.schedule)
        path = self._output(out_ckpt)
        best_path = best_checkpoint_path(path)
        log = _CsvLog(os.path.splitext(path)[0] + ".rft.csv", RFT_COLUMNS, config_hash(cfg))
        best = -math.inf
        batches = [scenes[i:i + cfg.rft.batch_size] for i in range(0, len(scenes), cfg.rft.batch_size)]
        for epoch in range(cfg.rft.epochs):
            for index, batch in enumerate(self._progress(batches, desc=f"rft {epoch}", unit="step")):
                rng = np.random.default_rng([cfg.seed, epoch, index])
                metrics = trainer.rft_step(batch, rng)
                metrics["epoch"] = epoch
                log.write(metrics)
                logger.info("step %d mean_r %.4f mean_r_refined %.4f clip_frac %.3f kl %.5f",
                            metrics["step"], metrics["mean_r"], metrics["mean_r_refined"],
                            metrics["clip_frac"], metrics["kl"])
                if metrics["mean_r"] > best:
                    best = metrics["mean_r"]
                    save_checkpoint(best_path, trainer.model, trainer.optimizer, cfg,
                                    {"stage": "rft", "step": trainer.steps_done, "mean_r": best})
        save_checkpoint(path, trainer.model, trainer.optimizer, cfg, {"stage": "rft", "step": trainer.steps_done})
        return path

    # -- eval -----------------------------------------------------------------

    def _evaluate_scene(self, model: PlannerModel, scene: Scene, index: int, steps: int, use_refine: bool,
                        samples: int, cfg: RunConfig) -> Tuple[SceneResult, float]:
        rng = np.random.default_rng([cfg.seed, index])
        schedule = make_schedule(steps, cfg.codec.response_len, cfg.diffusion.schedule)
        context = self.scorer.context(scene)
        breakdowns: List[RewardBreakdown] = []
        elapsed = []
        for _ in range(samples):
            began = time.perf_counter()
            tokens = sample(context, model, schedule, cfg.eval.temperature, rng).tokens
            if use_refine:
                tokens = refine(tokens, context, model, mode="argmax")
            elapsed.append(time.perf_counter() - began)
            breakdowns.append(self.scorer.breakdown(scene, tokens))
        result = SceneResult(seed=scene.seed, difficulty=scene.difficulty, single=breakdowns[0],
                             best_of_k=max(b.pdms for b in breakdowns), samples=samples)
        return result, float(np.median(elapsed))

    def run_eval(self, model: PlannerModel, scenes: Sequence[Scene], steps: int, use_refine: bool,
                 samples: int, cfg: Optional[RunConfig] = None) -> Tuple[EvalReport, List[float]]:
        """Evaluate scenes over ``eval.workers`` threads; output order follows scene order."""
        cfg = cfg or self.config
        use_refine = use_refine and model.has_refinement
        if samples < 1:
            raise ConfigError("samples_per_scene must be at least 1")

        def job(item):
            index, scene = item
            return self._evaluate_scene(model, scene, index, steps, use_refine, samples, cfg)

        items = list(enumerate(scenes))
        with ThreadPoolExecutor(max_workers=max(cfg.eval.workers, 1)) as pool:
            outcomes = list(self._progress(pool.map(job, items), total=len(items), desc="eval", unit="scene"))
        report = EvalReport(scenes=[o[0] for o in outcomes], steps=steps, refine=use_refine,
                            samples_per_scene=samples, config_hash=config_hash(cfg), seed=cfg.seed)
        return report, [o[1] for o in outcomes]

    @_guarded("Evaluation")
    def evaluate(self, ckpt_path: str, scenes_path: str, report_path: Optional[str] = None,
                 steps: Optional[int] = None, use_refine: Optional[bool] = None,
                 samples: Optional[int] = None) -> EvalReport:
        """Score checkpoint samples per scene; writes JSON and CSV reports plus a timing sidecar."""
        cfg = copy.deepcopy(self.config)
        if steps is not None:
            cfg.diffusion.steps = steps
        if use_refine is not None:
            cfg.eval.refine = use_refine
        if samples is not None:
            cfg.eval.samples_per_scene = samples
        ckpt = load_checkpoint(ckpt_path)
        self._check_codec(ckpt)
        report, latencies = self.run_eval(ckpt.model, load_scenes(scenes_path), cfg.diffusion.steps,
                                          cfg.eval.refine, cfg.eval.samples_per_scene, cfg)
        if report_path:
            path = self._output(report_path)
            with open(path, "w", encoding="utf-8") as f:
                json.dump(report.to_dict(), f, indent=2, sort_keys=True)
                f.write("\n")
            root = os.path.splitext(path)[0]
            with open(root + ".csv", "w", newline="", encoding="utf-8") as f:
                f.write(_metadata_line(report.config_hash))
                writer = csv.writer(f)
                writer.writerow(SCENE_COLUMNS)
                for r in report:
                    b = r.single
                    writer.writerow([r.seed, r.difficulty, b.nc, b.dac, b.ttc, b.comfort, b.ep, b.pdms, r.best_of_k])
            with open(root + ".timing.json", "w", encoding="utf-8") as f:
                json.dump({"median_latency_ms": 1000.0 * statistics.median(latencies) if latencies else 0.0,
                           "steps": report.steps, "workers": cfg.eval.workers}, f, indent=2)
            logger.info("Report written to %s", path)
        return report

    # -- sweep ----------------------------------------------------------------

    @_guarded("Sweep")
    def sweep(self, ckpt_path: str, scenes_path: str, out_csv: str,
              steps_grid: Optional[Sequence[int]] = None) -> List[Dict[str, float]]:
        """Score and median latency for every step count in the grid."""
        cfg = self.config
        grid = list(steps_grid) if steps_grid else [int(s) for s in cfg.eval.steps_grid.split(",") if s.strip()]
        if not grid or any(s < 1 for s in grid):
            raise ConfigError(f"Invalid steps grid: {grid}")
        ckpt = load_checkpoint(ckpt_path)
        self._check_codec(ckpt)
        scenes = load_scenes(scenes_path)
        log = _CsvLog(self._output(out_csv), SWEEP_COLUMNS, config_hash(cfg))
        rows = []
        for steps in grid:
            report, latencies = self.run_eval(ckpt.model, scenes, steps, cfg.eval.refine,
                                              cfg.eval.samples_per_scene)
            row = {"steps": steps, "pdms": report.mean("pdms"), "best_of_k": report.mean_best_of_k(),
                   "latency_ms": 1000.0 * statistics.median(latencies) if latencies else 0.0}
            log.write(row)
            rows.append(row)
            logger.info("steps %d pdms %.4f latency %.1f ms", steps, row["pdms"], row["latency_ms"])
        return rows

    # -- repair ---------------------------------------------------------------

    @_guarded("Repair")
    def repair(self, ckpt_path: str, scenes_path: str, out_path: str = "repair.json",
               count: int = 200) -> RepairReport:
        """Corrupt expert token sequences with one outlier each and score them before and after refinement."""
        if count < 1:
            raise ConfigError("repair count must be at least 1")
        cfg = self.config
        ckpt = load_checkpoint(ckpt_path)
        self._check_codec(ckpt)
        model = ckpt.model
        if not model.has_refinement:
            raise ModelError(f"Checkpoint {ckpt_path} has no refinement expert")
        examples = self.build_examples(load_scenes(scenes_path))
        if not examples:
            raise MaskplanError(f"No usable scenes in {scenes_path}")
        cases = []
        for index in self._progress(range(count), desc="repair", unit="case"):
            example = examples[index % len(examples)]
            rng = np.random.default_rng([cfg.seed, index])
            corrupted, position = outlier_corruption(example.target, rng, self.codec)
            refined = refine(corrupted, example.context, model, mode="argmax")
            cases.append(RepairCase(seed=example.scene.seed, position=position,
                                    clean=self.scorer.reward(example.scene, example.target),
                                    corrupted=self.scorer.reward(example.scene, corrupted),
                                    refined=self.scorer.reward(example.scene, refined)))
        report = RepairReport(cases=cases, config_hash=config_hash(cfg), seed=cfg.seed)
        summary = report.summary()
        logger.info("repair: corrupted %.4f refined %.4f restored %d/%d", summary["corrupted"],
                    summary["refined"], report.restored, report.failing)
        path = self._output(out_path)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(report.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")
        return report

    # -- plot -----------------------------------------------------------------

    @_guarded("Plotting")
    def plot(self, inputs: Sequence[str], out_dir: str) -> List[str]:
        os.makedirs(out_dir, exist_ok=True)
        written = []
        for path in inputs:
            written.extend(plots.plot_file(path, out_dir))
        return written
"""Progressive multi-stage recovery pipelines.

A pipeline is three cross-sectional adversarial models trained one after
another, each in a different rectilinear orientation. Stage 1 works from
the raw inputs alone; stages 2 and 3 additionally receive the previous
stage's volume estimate as an extra input channel, so each stage refines a
progressively more consistent volume. Earlier stages are frozen once
trained.

Two task types share the machinery:

  * reconstruction: inputs are real/imaginary channels of the zero-filled
    inverse FFT of undersampled k-space; every stage output is clamped to
    a nonnegative magnitude, given the zero-filled phase, and projected
    onto the acquired samples (data consistency).
  * synthesis: inputs are co-registered source contrasts; stages 2 and 3
    predict a residual that is added to the prior estimate.

Slice inputs are assembled channel-first: for each of the n_c neighboring
cross-sections (edge-replicated) the full per-slice channel block, then
the prior estimate's center slice last when a prior exists. All volumes
inside a pipeline live in per-subject normalized intensity space.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from provo.geometry import (
    Orientation,
    ProgressionOrder,
    SliceStack,
    Volume,
    enumerate_orders,
    extract_neighborhood,
    normalize_volume,
    stack_to_volume,
    take_slice,
)
from provo.kspace import (
    KSpaceVolume,
    coil_combine,
    coil_project,
    data_consistency,
    generate_vd_mask,
    phase_restore,
    undersample,
)
from provo.metrics import psnr
from provo.nets import (
    DiscriminatorConfig,
    GeneratorConfig,
    build_discriminator,
    build_generator,
    freeze,
    load_model,
    save_checkpoint,
    scale_config,
)
from provo.seeds import derive_seed
from provo.training import LossWeights, TrainConfig, train_2d_model

MANIFEST_NAME = "pipeline.json"
PIPELINE_VERSION = 1


def default_device() -> str:
    return os.environ.get("PROVO_DEVICE", "cpu")


# ---------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class ReconstructionTask:
    """Recover a fully-sampled volume from undersampled k-space."""

    R: float
    readout_axis: int = 2
    contrast: str | None = None

    def __post_init__(self):
        if self.R <= 1:
            raise ValueError(f"acceleration R must be > 1, got {self.R}")
        if self.readout_axis not in (0, 1, 2):
            raise ValueError(f"readout_axis must be 0, 1 or 2, got {self.readout_axis}")


@dataclass(frozen=True)
class SynthesisTask:
    """Predict a target contrast from one or more source contrasts."""

    sources: tuple[str, ...]
    target: str

    def __post_init__(self):
        if not self.sources:
            raise ValueError("synthesis needs at least one source contrast")
        if len(set(self.sources)) != len(self.sources):
            raise ValueError(f"duplicate source contrasts: {self.sources}")
        if self.target in self.sources:
            raise ValueError(f"target {self.target!r} also listed as a source")
        object.__setattr__(self, "sources", tuple(self.sources))


def task_to_dict(task) -> dict:
    if isinstance(task, ReconstructionTask):
        return {"kind": "reconstruction", "R": task.R, "readout_axis": task.readout_axis,
                "contrast": task.contrast}
    return {"kind": "synthesis", "sources": list(task.sources), "target": task.target}


def task_from_dict(d: dict):
    kind = d.get("kind")
    if kind == "reconstruction":
        return ReconstructionTask(R=d["R"], readout_axis=d.get("readout_axis", 2),
                                  contrast=d.get("contrast"))
    if kind == "synthesis":
        return SynthesisTask(sources=tuple(d["sources"]), target=d["target"])
    raise ValueError(f"unknown task kind {kind!r}")


def stage_input_channels(task, stage_index: int, n_c: int) -> int:
    """Generator input channel count for one stage.

    Reconstruction uses 2 channels (real, imag) per neighboring slice;
    synthesis uses one channel per source contrast per neighboring slice.
    Stages 2 and 3 append one prior-estimate channel.
    """
    if stage_index not in (1, 2, 3):
        raise ValueError(f"stage_index must be 1, 2 or 3, got {stage_index}")
    if n_c < 1 or n_c % 2 == 0:
        raise ValueError(f"n_c must be a positive odd integer, got {n_c}")
    if isinstance(task, ReconstructionTask):
        base = 2 * n_c
    else:
        base = len(task.sources) * n_c
    return base + (1 if stage_index >= 2 else 0)


# ---------------------------------------------------------------------------
# subjects


@dataclass
class ReconSubject:
    """One subject's acquired k-space plus optional ground truth.

    Everything is in normalized intensity space; the scale back to raw
    units sits in acquired.meta['norm_scale'].
    """

    sid: str
    acquired: KSpaceVolume
    truth: Volume | None = None
    maps: np.ndarray | None = None

    def __post_init__(self):
        if self.acquired.coils > 1 and self.maps is None:
            raise ValueError(f"{self.sid}: multi-coil acquisition requires sensitivity maps")
        if self.truth is not None and self.truth.dims != self.acquired.dims:
            raise ValueError(
                f"{self.sid}: truth dims {self.truth.dims} != acquired dims {self.acquired.dims}"
            )


@dataclass
class SynthSubject:
    """One subject's normalized source contrasts plus optional target."""

    sid: str
    sources: list[Volume]
    target: Volume | None = None

    def __post_init__(self):
        if not self.sources:
            raise ValueError(f"{self.sid}: no source volumes")
        dims = {v.dims for v in self.sources}
        if self.target is not None:
            dims.add(self.target.dims)
        if len(dims) != 1:
            raise ValueError(f"{self.sid}: inconsistent volume dims {sorted(dims)}")


def prepare_recon_subject(sid: str, truth: Volume, task: ReconstructionTask,
                          mask_seed: int, maps: np.ndarray | None = None) -> ReconSubject:
    """Simulate an acquisition of a known volume.

    The truth is normalized, projected to coils when maps are given, and
    undersampled with a fresh variable-density mask seeded by mask_seed.
    """
    norm, _ = normalize_volume(truth)
    pe_axes = [a for a in range(3) if a != task.readout_axis]
    pe_shape = (norm.dims[pe_axes[0]], norm.dims[pe_axes[1]])
    mask = generate_vd_mask(pe_shape, task.R, mask_seed)
    if maps is not None:
        coils = coil_project(norm.data, maps)
        src = Volume(coils, spacing=norm.spacing, meta=dict(norm.meta))
    else:
        src = norm
    acquired = undersample(src, mask, task.readout_axis)
    return ReconSubject(sid=sid, acquired=acquired, truth=norm.magnitude(), maps=maps)


def prepare_synth_subject(sid: str, volumes: dict, task: SynthesisTask) -> SynthSubject:
    """Normalize and order a subject's contrasts for a synthesis task."""
    missing = [c for c in task.sources if c not in volumes]
    if missing:
        raise ValueError(f"{sid}: missing source contrasts {missing}")
    sources = [normalize_volume(volumes[c])[0] for c in task.sources]
    target = None
    if task.target in volumes:
        target = normalize_volume(volumes[task.target])[0]
    return SynthSubject(sid=sid, sources=sources, target=target)


def combined_zero_filled(subject: ReconSubject) -> np.ndarray:
    """Coil-combined zero-filled image, complex rank-4 [1, d0, d1, d2]."""
    zf = subject.acquired.zero_filled().data
    if subject.maps is not None:
        return coil_combine(zf, subject.maps)
    return zf


def zero_filled_magnitude(subject: ReconSubject) -> Volume:
    """Magnitude of the zero-filled image; the no-model baseline."""
    meta = dict(subject.acquired.meta)
    meta["estimate"] = "zero_filled"
    return Volume(np.abs(combined_zero_filled(subject)), spacing=subject.acquired.spacing,
                  meta=meta)


# ---------------------------------------------------------------------------
# slice assembly


def _input_volume(task, subject) -> Volume:
    if isinstance(task, ReconstructionTask):
        zf = combined_zero_filled(subject)
        data = np.concatenate([zf.real, zf.imag], axis=0)
        return Volume(data, spacing=subject.acquired.spacing)
    data = np.concatenate([v.data for v in subject.sources], axis=0)
    return Volume(data, spacing=subject.sources[0].spacing)


def _target_volume(task, subject) -> Volume | None:
    return subject.truth if isinstance(task, ReconstructionTask) else subject.target


def stage_pairs(task, subject, orientation: Orientation, n_c: int,
                prior: Volume | None, with_target: bool = True) -> list:
    """Per-slice model inputs (and targets) for one subject and one stage.

    Returns [(x, y), ...] float32 arrays, or [x, ...] when with_target is
    False. x is [C_in, h, w] laid out as described in the module docstring;
    y is the matching [1, h, w] slice of the truth / target volume.
    """
    inp = _input_volume(task, subject)
    prior_mag = prior.magnitude() if prior is not None else None
    target = _target_volume(task, subject) if with_target else None
    if with_target and target is None:
        raise ValueError(f"{subject.sid}: no ground truth available for training")

    n = inp.dims[orientation.slice_axis]
    out = []
    for i in range(n):
        x = extract_neighborhood(inp, orientation, i, n_c)
        if prior_mag is not None:
            x = np.concatenate([x, take_slice(prior_mag, orientation, i)], axis=0)
        x = np.ascontiguousarray(x, dtype=np.float32)
        if with_target:
            y = np.ascontiguousarray(take_slice(target, orientation, i), dtype=np.float32)
            out.append((x, y))
        else:
            out.append(x)
    return out


def _residual_compose(x: torch.Tensor, g: torch.Tensor) -> torch.Tensor:
    # prior estimate rides in the last input channel
    return x[:, -1:] + g


# ---------------------------------------------------------------------------
# stages


@dataclass
class TrainedStage:
    index: int
    orientation: Orientation
    gen: torch.nn.Module
    disc: torch.nn.Module | None
    gen_config: GeneratorConfig
    n_c: int


def apply_stage(task, stage: TrainedStage, subject, prior: Volume | None,
                device: str | None = None) -> Volume:
    """Run one trained stage over a subject, returning its volume estimate.

    Synthesis estimates are clamped to [-1, 1] (stages past the first add
    the generator output to the prior slice before clamping).
    Reconstruction estimates are clamped nonnegative, given the
    zero-filled phase, and made consistent with the acquired samples; the
    result is a complex volume.
    """
    if device is None:
        device = default_device()
    is_recon = isinstance(task, ReconstructionTask)
    if stage.index >= 2 and prior is None:
        raise ValueError(f"stage {stage.index} needs a prior estimate")

    xs = stage_pairs(task, subject, stage.orientation, stage.n_c, prior, with_target=False)
    gen = stage.gen.to(device)
    gen.eval()
    residual = (not is_recon) and stage.index >= 2
    slices = []
    with torch.no_grad():
        for x_np in xs:
            x = torch.from_numpy(x_np)[None].to(device)
            g = gen(x)
            if residual:
                g = _residual_compose(x, g)
            slices.append(g[0].cpu().numpy().astype(np.float32))

    ref = _input_volume(task, subject)
    stack = SliceStack(slices=slices, orientation=stage.orientation,
                       origin_shape=(1,) + ref.dims)
    est = stack_to_volume(stack, spacing=ref.spacing)

    if not is_recon:
        data = np.clip(est.data, -1.0, 1.0)
        meta = {"estimate": f"stage{stage.index}", "orientation": stage.orientation.letter}
        return Volume(data, spacing=est.spacing, meta=meta)

    mag = np.clip(est.data, 0.0, None)
    zf = combined_zero_filled(subject)
    pred = phase_restore(mag, zf)
    if subject.maps is not None:
        pred_coils = coil_project(pred, subject.maps)
        dc = data_consistency(pred_coils, subject.acquired)
        combined = coil_combine(dc, subject.maps)
    else:
        combined = data_consistency(pred, subject.acquired)
    meta = {"estimate": f"stage{stage.index}", "orientation": stage.orientation.letter}
    return Volume(combined, spacing=est.spacing, meta=meta)


# ---------------------------------------------------------------------------
# pipeline training


@dataclass
class Pipeline:
    """Three frozen stages plus the settings that produced them."""

    task: ReconstructionTask | SynthesisTask
    order: ProgressionOrder
    n_c: int
    n_f: float
    stages: list[TrainedStage]
    metrics: dict = field(default_factory=dict)
    settings: dict = field(default_factory=dict)

    def infer(self, subject, device: str | None = None) -> Volume:
        """Full progressive pass; returns the final normalized estimate."""
        prior = None
        for stage in self.stages:
            prior = apply_stage(self.task, stage, subject, prior, device)
        return prior

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        entries = []
        for stage in self.stages:
            gname = f"stage{stage.index}_gen.ckpt"
            save_checkpoint(out / gname, stage.gen, "generator")
            dname = None
            if stage.disc is not None:
                dname = f"stage{stage.index}_disc.ckpt"
                save_checkpoint(out / dname, stage.disc, "discriminator")
            entries.append({"index": stage.index, "orientation": stage.orientation.letter,
                            "generator": gname, "discriminator": dname})
        manifest = {
            "version": PIPELINE_VERSION,
            "task": task_to_dict(self.task),
            "order": self.order.compact,
            "n_c": self.n_c,
            "n_f": self.n_f,
            "stages": entries,
            "metrics": self.metrics,
            "settings": self.settings,
        }
        with open(out / MANIFEST_NAME, "w") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, in_dir) -> "Pipeline":
        src = Path(in_dir)
        with open(src / MANIFEST_NAME) as f:
            manifest = json.load(f)
        if manifest.get("version") != PIPELINE_VERSION:
            raise ValueError(f"unsupported pipeline version {manifest.get('version')}")
        task = task_from_dict(manifest["task"])
        order = ProgressionOrder.from_string(manifest["order"])
        stages = []
        for entry in manifest["stages"]:
            gen = freeze(load_model(src / entry["generator"]))
            disc = None
            if entry.get("discriminator"):
                disc = freeze(load_model(src / entry["discriminator"]))
            stages.append(TrainedStage(index=entry["index"],
                                       orientation=Orientation.from_letter(entry["orientation"]),
                                       gen=gen, disc=disc, gen_config=gen.cfg,
                                       n_c=manifest["n_c"]))
        return cls(task=task, order=order, n_c=manifest["n_c"], n_f=manifest["n_f"],
                   stages=stages, metrics=manifest.get("metrics", {}),
                   settings=manifest.get("settings", {}))


def _estimate_magnitude(task, est: Volume) -> Volume:
    return est.magnitude() if isinstance(task, ReconstructionTask) else est


def _stage_val_psnr(task, val_subjects, priors) -> float:
    vals = []
    for s in val_subjects:
        ref = _target_volume(task, s)
        if ref is None:
            continue
        vals.append(psnr(ref, _estimate_magnitude(task, priors[s.sid])))
    if not vals:
        return math.nan
    return float(np.mean(vals))


def train_pipeline(task, train_subjects, val_subjects, order: ProgressionOrder,
                   train_cfg: TrainConfig, *, n_c: int = 1, n_f: float = 1.0,
                   weights: LossWeights = LossWeights(), seed: int = 0,
                   out_dir=None, device: str | None = None) -> Pipeline:
    """Train the three stages sequentially and return the frozen pipeline.

    Stage n is trained on every cross-section of every training subject in
    orientation order[n-1], with the previous stage's estimates injected
    as priors for n >= 2. After each stage the estimates of all subjects
    are rematerialized and per-stage validation PSNR is recorded under
    metrics['stage_val_psnr']. For reconstruction the zero-filled baseline
    lands in metrics['baseline_val_psnr'].

    Per-stage seeds, histories and checkpoints are derived from seed and
    out_dir; the same seed always reproduces the same pipeline.
    """
    if device is None:
        device = default_device()
    if not train_subjects:
        raise ValueError("no training subjects")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    is_recon = isinstance(task, ReconstructionTask)
    everyone = list(train_subjects) + list(val_subjects)
    priors = {s.sid: None for s in everyone}
    stages: list[TrainedStage] = []
    stage_val = []
    stage_best_epochs = []

    metrics: dict = {}
    if is_recon and val_subjects:
        zf_vals = [psnr(s.truth, zero_filled_magnitude(s)) for s in val_subjects
                   if s.truth is not None]
        if zf_vals:
            metrics["baseline_val_psnr"] = float(np.mean(zf_vals))

    for n, orientation in enumerate(order, start=1):
        in_ch = stage_input_channels(task, n, n_c)
        gen_cfg = scale_config(GeneratorConfig(in_channels=in_ch), n_f)
        disc_cfg = scale_config(DiscriminatorConfig(in_channels=in_ch + 1), n_f)
        gen = build_generator(gen_cfg, seed=derive_seed(seed, "stage", n, "gen"))
        disc = build_discriminator(disc_cfg, seed=derive_seed(seed, "stage", n, "disc"))

        pairs = []
        for s in train_subjects:
            pairs.extend(stage_pairs(task, s, orientation, n_c, priors[s.sid]))
        val_pairs = []
        for s in val_subjects:
            if _target_volume(task, s) is not None:
                val_pairs.extend(stage_pairs(task, s, orientation, n_c, priors[s.sid]))
        compose = _residual_compose if (not is_recon and n >= 2) else None

        stage_cfg = dataclasses.replace(train_cfg, seed=derive_seed(seed, "stage", n, "shuffle"))
        hist_path = out / f"stage{n}_history.ndjson" if out is not None else None
        result = train_2d_model(pairs, gen, disc, stage_cfg, weights, compose=compose,
                                val_pairs=val_pairs or None, device=device,
                                history_path=hist_path)
        freeze(gen)
        freeze(disc)
        stage = TrainedStage(index=n, orientation=orientation, gen=gen, disc=disc,
                             gen_config=gen_cfg, n_c=n_c)
        stages.append(stage)
        stage_best_epochs.append(result.best_epoch)

        for s in everyone:
            priors[s.sid] = apply_stage(task, stage, s, priors[s.sid], device)
        stage_val.append(_stage_val_psnr(task, val_subjects, priors))

    metrics["stage_val_psnr"] = stage_val
    metrics["stage_best_epoch"] = stage_best_epochs
    settings = {
        "seed": seed,
        "device": device,
        "train": dataclasses.asdict(train_cfg),
        "loss_weights": dataclasses.asdict(weights),
        "n_train_subjects": len(train_subjects),
        "n_val_subjects": len(val_subjects),
    }
    pipe = Pipeline(task=task, order=order, n_c=n_c, n_f=n_f, stages=stages,
                    metrics=metrics, settings=settings)
    if out is not None:
        pipe.save(out)
    return pipe


# ---------------------------------------------------------------------------
# progression-order search


@dataclass
class OrderSearchResult:
    rows: list  # (compact order, score) in enumeration order
    best: ProgressionOrder
    report: str


def format_order_table(rows) -> str:
    lines = [f"{'order':<10} {'val_psnr_db':>12}"]
    for compact, score in rows:
        label = ProgressionOrder.from_string(compact).label
        text = f"{score:.2f}" if score == score else "nan"
        lines.append(f"{label:<10} {text:>12}")
    return "\n".join(lines)


def _order_search_worker(args):
    (task, train_subjects, val_subjects, compact, train_cfg, n_c, n_f, weights,
     seed, out_dir, device) = args
    order = ProgressionOrder.from_string(compact)
    sub = Path(out_dir) / compact if out_dir is not None else None
    pipe = train_pipeline(task, train_subjects, val_subjects, order, train_cfg,
                          n_c=n_c, n_f=n_f, weights=weights, seed=seed, out_dir=sub,
                          device=device)
    return compact, float(pipe.metrics["stage_val_psnr"][-1])


def order_search(task, train_subjects, val_subjects, train_cfg: TrainConfig, *,
                 orders=None, trainer=None, n_c: int = 1, n_f: float = 1.0,
                 weights: LossWeights = LossWeights(), seed: int = 0,
                 parallel: int = 1, out_dir=None,
                 device: str | None = None) -> OrderSearchResult:
    """Score every progression order and pick the best.

    By default each order gets a full pipeline trained from the same seed
    and is scored by final-stage validation PSNR; ties go to the earliest
    order in enumeration order (alphabetical). trainer, when given, maps a
    ProgressionOrder to a score and replaces the built-in training (it
    must be picklable for parallel > 1). The text report has one row per
    order.
    """
    if orders is None:
        orders = enumerate_orders()
    if not val_subjects:
        raise ValueError("order search needs validation subjects to score")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    if trainer is not None:
        scored = [(o.compact, float(trainer(o))) for o in orders]
    elif parallel > 1:
        args = [(task, train_subjects, val_subjects, o.compact, train_cfg, n_c, n_f,
                 weights, seed, out, device) for o in orders]
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            scored = list(pool.map(_order_search_worker, args))
    else:
        scored = [
            _order_search_worker((task, train_subjects, val_subjects, o.compact,
                                  train_cfg, n_c, n_f, weights, seed, out, device))
            for o in orders
        ]

    best_compact, _ = max(scored, key=lambda row: row[1])
    report = format_order_table(scored)
    if out is not None:
        (out / "order_search.txt").write_text(report + "\n")
        with open(out / "order_search.json", "w") as f:
            json.dump({"rows": scored, "best": best_compact,
                       "settings": {"seed": seed, "n_c": n_c, "n_f": n_f,
                                    "parallel": parallel}}, f, indent=2, sort_keys=True)
    return OrderSearchResult(rows=scored, best=ProgressionOrder.from_string(best_compact),
                             report=report)

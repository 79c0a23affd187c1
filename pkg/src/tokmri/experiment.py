"""Experiment orchestration behind the CLI subcommands.

Each command reads an :class:`~tokmri.config.ExperimentConfig`, produces its
artifacts under ``out_dir`` and returns a small result object.  All file
writes are temp-file-then-rename, and a command re-run with the same config
and seed produces byte-identical outputs (bench wall-clock fields aside).
"""

from __future__ import annotations

import csv
import io
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .errors import ConfigError
from .fourier import NoiseSpec
from .metrics import evaluate
from .model import (
    LatentTransformer,
    RandomMaskSampler,
    TrainState,
    TransformerConfig,
    train_model,
)
from .phantoms import PhantomSpec, make_splits, random_ellipse_phantom
from .policies import AcquisitionConfig, AcquisitionTrajectory, run_acquisition
from .storage import (
    atomic_write_bytes,
    atomic_write_text,
    load_ctns,
    read_json,
    save_ctns,
    save_mask,
    write_json,
)
from .tokenizer import Tokenizer, channel_stats, normalize_channel, train_tokenizer


def _fmt(x) -> str:
    """Shortest round-trip float formatting; stable across runs."""
    return repr(float(x))


# ---------------------------------------------------------------------------
# gen-data
# ---------------------------------------------------------------------------

@dataclass
class GenDataResult:
    manifest_path: Path
    counts: dict[str, int]


def cmd_gen_data(cfg: ExperimentConfig) -> GenDataResult:
    out = Path(cfg.out_dir) / "data"
    d = cfg.data
    train_s, val_s, test_s = make_splits(
        d.n_train, d.n_val, d.n_test, seed=d.master_seed
    )
    manifest = {
        "size": d.size,
        "n_ellipses": d.n_ellipses,
        "intensity": [d.intensity_lo, d.intensity_hi],
        "phase_mode": d.phase_mode,
        "master_seed": d.master_seed,
        "splits": {},
    }
    for split, seeds in (("train", train_s), ("val", val_s), ("test", test_s)):
        entries = []
        for i, seed in enumerate(seeds):
            spec = PhantomSpec(
                size=d.size,
                n_ellipses=d.n_ellipses,
                intensity_lo=d.intensity_lo,
                intensity_hi=d.intensity_hi,
                phase_mode=d.phase_mode,
                seed=int(seed),
            )
            img = random_ellipse_phantom(spec)
            image_id = f"{split}_{i:04d}"
            rel = f"{split}/{image_id}.ctns"
            save_ctns(out / rel, img)
            entries.append({"id": image_id, "file": rel, "seed": int(seed)})
        manifest["splits"][split] = entries
    # the manifest is written last so a failed generation leaves no manifest
    write_json(out / "manifest.json", manifest)
    return GenDataResult(
        manifest_path=out / "manifest.json",
        counts={k: len(v) for k, v in manifest["splits"].items()},
    )


def load_split(cfg: ExperimentConfig, split: str) -> list[tuple[str, np.ndarray]]:
    data_dir = Path(cfg.out_dir) / "data"
    manifest_path = data_dir / "manifest.json"
    if not manifest_path.exists():
        raise ConfigError(f"missing data manifest: {manifest_path} (run gen-data)")
    manifest = read_json(manifest_path)
    return [
        (entry["id"], load_ctns(data_dir / entry["file"]))
        for entry in manifest["splits"][split]
    ]


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    tokenizer_path: Path
    model_dir: Path
    loss_trace_path: Path
    final_token_ce: float
    tokenizer_report: dict


def _artifact_paths(cfg: ExperimentConfig) -> dict[str, Path]:
    art = Path(cfg.out_dir) / "artifacts"
    return {
        "tokenizer": art / "tokenizer.json",
        "model": art / "model",
        "loss_trace": art / "loss_trace.csv",
        "train_report": art / "train_report.json",
        "checkpoint": art / "checkpoint",
    }


def save_checkpoint(state: TrainState, directory: Path) -> None:
    directory = Path(directory)
    state.model.save(directory / "model")
    opt = {f"m.{k}": v for k, v in state.adam.m.items()}
    opt.update({f"v.{k}": v for k, v in state.adam.v.items()})
    buf = io.BytesIO()
    np.savez(buf, **opt)
    atomic_write_bytes(directory / "optimizer.npz", buf.getvalue())
    write_json(directory / "meta.json", {
        "epoch": state.epoch,
        "adam_t": state.adam.t,
        "rng_state": state.rng_state,
        "trace": [[int(e), int(s), float(l)] for e, s, l in state.trace],
    })


def load_checkpoint(directory: Path) -> TrainState:
    from .model import AdamState

    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"missing checkpoint meta: {meta_path}")
    meta = read_json(meta_path)
    model = LatentTransformer.load(directory / "model")
    with np.load(directory / "optimizer.npz") as opt:
        m = {k[2:]: opt[k].copy() for k in opt.files if k.startswith("m.")}
        v = {k[2:]: opt[k].copy() for k in opt.files if k.startswith("v.")}
    rng_state = meta["rng_state"]
    if rng_state is not None:
        # JSON round-trips the PCG64 integers losslessly but not their types
        rng_state = {
            "bit_generator": rng_state["bit_generator"],
            "state": {k: int(v_) for k, v_ in rng_state["state"].items()},
            "has_uint32": int(rng_state["has_uint32"]),
            "uinteger": int(rng_state["uinteger"]),
        }
    return TrainState(
        model=model,
        adam=AdamState(m=m, v=v, t=int(meta["adam_t"])),
        epoch=int(meta["epoch"]),
        trace=[tuple(row) for row in meta["trace"]],
        rng_state=rng_state,
    )


def cmd_train(cfg: ExperimentConfig) -> TrainResult:
    paths = _artifact_paths(cfg)
    train_images = load_split(cfg, "train")
    images = [img for _, img in train_images]

    # tokenizer sees per-image-normalized channels, like the encoder will
    channels = []
    for img in images:
        for ch in (img.real, img.imag):
            channels.append(normalize_channel(ch, channel_stats(ch)))
    tok, tok_report = train_tokenizer(
        channels,
        K=cfg.tokenizer.K,
        D=cfg.tokenizer.D,
        p=cfg.tokenizer.p,
        iters=cfg.tokenizer.kmeans_iters,
        seed=cfg.train.seed,
    )
    tok.save(paths["tokenizer"])

    sampler = RandomMaskSampler(
        rho_c=cfg.acquisition.rho_c,
        accel_lo=cfg.train.accel_lo,
        accel_hi=cfg.train.accel_hi,
    )
    resume = None
    if cfg.train.resume_from:
        resume = load_checkpoint(Path(cfg.train.resume_from))
    state = train_model(
        images,
        tok,
        TransformerConfig(
            layers=cfg.model.layers,
            heads=cfg.model.heads,
            embed_dim=cfg.model.embed_dim,
            ffn_dim=cfg.model.ffn_dim,
        ),
        mask_sampler=sampler,
        epochs=cfg.train.epochs,
        batch_size=cfg.train.batch_size,
        lr=cfg.train.lr,
        seed=cfg.train.seed,
        noise=NoiseSpec(cfg.train.noise_sigma, seed=cfg.train.seed),
        resume=resume,
        on_epoch_end=lambda st: save_checkpoint(st, paths["checkpoint"]),
    )
    state.model.save(paths["model"])

    rows = ["epoch,step,token_ce"]
    rows += [f"{e},{s},{_fmt(l)}" for e, s, l in state.trace]
    atomic_write_text(paths["loss_trace"], "\n".join(rows) + "\n")

    final_ce = float(state.trace[-1][2]) if state.trace else float("nan")
    write_json(paths["train_report"], {
        "final_token_ce": final_ce,
        "epochs": state.epoch,
        "tokenizer": {k: v for k, v in tok_report.items() if k != "kmeans_trace"},
        "n_train_images": len(images),
    })
    return TrainResult(
        tokenizer_path=paths["tokenizer"],
        model_dir=paths["model"],
        loss_trace_path=paths["loss_trace"],
        final_token_ce=final_ce,
        tokenizer_report=tok_report,
    )


def load_artifacts(cfg: ExperimentConfig) -> tuple[Tokenizer, LatentTransformer]:
    paths = _artifact_paths(cfg)
    if not paths["tokenizer"].exists():
        raise ConfigError(f"missing trained tokenizer: {paths['tokenizer']}")
    model_manifest = paths["model"] / "manifest.json"
    if not model_manifest.exists():
        raise ConfigError(f"missing trained model: {model_manifest}")
    return Tokenizer.load(paths["tokenizer"]), LatentTransformer.load(paths["model"])


# ---------------------------------------------------------------------------
# run
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    metrics_csv: Path
    metrics_json: Path
    curves_csv: Path
    rows: list[dict] = field(default_factory=list)
    summaries: list[dict] = field(default_factory=list)


def _traj_seed(seed: int, image_index: int) -> int:
    return int(seed) * 1_000_003 + image_index


def _trajectory_records(policy: str, traj: AcquisitionTrajectory) -> str:
    lines = []
    for rec in traj.steps:
        lines.append(json.dumps({
            "step": rec.step,
            "policy": policy,
            "lines": [int(j) for j in rec.lines],
            "score_argmax": (
                None if rec.scores is None else int(np.argmax(rec.scores))
            ),
            "mask_nnz": rec.mask.nnz,
        }, sort_keys=True))
    return "\n".join(lines) + ("\n" if lines else "")


def run_one_policy_config(
    cfg, tokenizer, model, images, policy, R, seed
) -> list[tuple[str, AcquisitionTrajectory]]:
    acq = cfg.acquisition
    results: list[tuple[str, AcquisitionTrajectory]] = [None] * len(images)

    def work(item):
        idx, (image_id, img) = item
        acq_cfg = AcquisitionConfig(
            R=R,
            rho_c=acq.rho_c,
            T=acq.T,
            lines_per_step=acq.lines_per_step,
            policy=policy,
            noise=NoiseSpec(acq.noise_sigma, seed=acq.noise_seed),
            seed=_traj_seed(seed, idx),
        )
        return idx, image_id, run_acquisition(img, acq_cfg, model, tokenizer)

    with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
        for idx, image_id, traj in pool.map(work, enumerate(images)):
            results[idx] = (image_id, traj)
    return results


def cmd_run(cfg: ExperimentConfig) -> RunResult:
    tokenizer, model = load_artifacts(cfg)
    images = load_split(cfg, "test")
    res_dir = Path(cfg.out_dir) / "results"
    acq = cfg.acquisition

    metric_rows: list[dict] = []
    curve_rows: list[dict] = []
    summaries: list[dict] = []
    # accumulators keyed by (policy, R)
    group_rows: dict[tuple, list[dict]] = {}

    def eval_one(image_id, img, traj):
        return evaluate(np.abs(img), np.abs(traj.reconstruction),
                        psnr_cap=cfg.metrics.psnr_cap)

    for policy in acq.policies:
        if policy == "oracle":
            runs = run_one_policy_config(
                cfg, tokenizer, model, images, "oracle", R=1, seed=0
            )
            for (image_id, img), (_, traj) in zip(images, runs):
                m = eval_one(image_id, img, traj)
                row = {"image_id": image_id, "policy": "oracle", "R": None,
                       "T": 0, "seed": None, **m}
                metric_rows.append(row)
                group_rows.setdefault(("oracle", None), []).append(row)
                save_ctns(res_dir / "recon" / "oracle" / f"{image_id}.ctns",
                          traj.reconstruction)
            continue
        for R in acq.accelerations:
            for seed in acq.seeds:
                tag = f"{policy}_R{R}_seed{seed}"
                runs = run_one_policy_config(
                    cfg, tokenizer, model, images, policy, R, seed
                )
                for (image_id, img), (_, traj) in zip(images, runs):
                    m = eval_one(image_id, img, traj)
                    row = {"image_id": image_id, "policy": policy, "R": R,
                           "T": acq.T, "seed": seed, **m}
                    metric_rows.append(row)
                    group_rows.setdefault((policy, R), []).append(row)
                    tdir = res_dir / "trajectories" / tag
                    atomic_write_text(tdir / f"{image_id}.jsonl",
                                      _trajectory_records(policy, traj))
                    save_mask(tdir / f"{image_id}_mask.json", traj.final_mask)
                    save_ctns(res_dir / "recon" / tag / f"{image_id}.ctns",
                              traj.reconstruction)
                    for rec in traj.steps:
                        curve_rows.append({
                            "policy": policy, "R": R, "seed": seed,
                            "image_id": image_id, "steps_done": rec.step - 1,
                            "nmse": rec.nmse_before,
                        })
                    curve_rows.append({
                        "policy": policy, "R": R, "seed": seed,
                        "image_id": image_id, "steps_done": len(traj.steps),
                        "nmse": traj.final_nmse,
                    })

    for (policy, R), rows in group_rows.items():
        summaries.append({
            "image_id": "summary",
            "policy": policy,
            "R": R,
            "T": 0 if policy == "oracle" else acq.T,
            "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows])),
            "nmse": float(np.mean([r["nmse"] for r in rows])),
        })

    def csv_cell(v):
        if v is None:
            return ""
        if isinstance(v, float):
            return _fmt(v)
        return str(v)

    cols = ["image_id", "policy", "R", "T", "psnr", "ssim", "nmse"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(cols)
    for row in metric_rows + summaries:
        writer.writerow([csv_cell(row[c]) for c in cols])
    metrics_csv = res_dir / "metrics.csv"
    atomic_write_text(metrics_csv, buf.getvalue())

    metrics_json = res_dir / "metrics.json"
    write_json(metrics_json, {
        "rows": metric_rows,
        "summaries": summaries,
        "seeds": list(acq.seeds),
        "accelerations": list(acq.accelerations),
        "policies": list(acq.policies),
    })

    curve_cols = ["policy", "R", "seed", "image_id", "steps_done", "nmse"]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(curve_cols)
    for row in curve_rows:
        writer.writerow([csv_cell(row[c]) for c in curve_cols])
    curves_csv = res_dir / "curves.csv"
    atomic_write_text(curves_csv, buf.getvalue())

    return RunResult(
        metrics_csv=metrics_csv,
        metrics_json=metrics_json,
        curves_csv=curves_csv,
        rows=metric_rows,
        summaries=summaries,
    )


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------

@dataclass
class BenchResult:
    report_json: Path
    report_csv: Path
    rows: list[dict] = field(default_factory=list)


def cmd_bench(cfg: ExperimentConfig) -> BenchResult:
    tokenizer, model = load_artifacts(cfg)
    images = load_split(cfg, "test")
    if not images:
        raise ConfigError("bench needs at least one test image (run gen-data)")
    bench_dir = Path(cfg.out_dir) / "bench"
    rows = []
    for policy in ("les", "geo"):
        times: list[float] = []
        total = 0.0
        img_idx = 0
        while len(times) < cfg.bench.min_steps:
            image_id, img = images[img_idx % len(images)]
            acq_cfg = AcquisitionConfig(
                R=cfg.bench.accel,
                rho_c=cfg.acquisition.rho_c,
                T=cfg.bench.T,
                policy=policy,
                noise=NoiseSpec(cfg.acquisition.noise_sigma,
                                seed=cfg.acquisition.noise_seed),
                seed=img_idx,
            )
            traj = run_acquisition(img, acq_cfg, model, tokenizer)
            step_times = [rec.time_ms for rec in traj.steps]
            times.extend(step_times)
            total += sum(step_times) / 1e3
            img_idx += 1
        rows.append({
            "policy": policy,
            "steps": len(times),
            "step_ms_mean": float(np.mean(times)),
            "step_ms_std": float(np.std(times)),
            "total_s": total,
        })
    write_json(bench_dir / "latency.json", {"rows": rows})
    cols = ["policy", "steps", "step_ms_mean", "step_ms_std", "total_s"]
    lines = [",".join(cols)]
    for row in rows:
        lines.append(",".join(str(row[c]) for c in cols))
    atomic_write_text(bench_dir / "latency.csv", "\n".join(lines) + "\n")
    return BenchResult(
        report_json=bench_dir / "latency.json",
        report_csv=bench_dir / "latency.csv",
        rows=rows,
    )

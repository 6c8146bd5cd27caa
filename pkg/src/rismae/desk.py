"""Desk-scale reference experiment: generate, pretrain, fine-tune, compare to scratch.

The dataset uses 64 samples per symbol so an 8-sample patch covers an
eighth of a symbol; at 8 samples per symbol each patch holds one
independent random symbol and masked content is unpredictable from
context.
"""

from __future__ import annotations

import json
import logging
import time
from pathlib import Path

import numpy as np

from .metrics import config_digest, evaluate_dataset
from .model import ModelConfig, RISMAE, load_checkpoint, save_checkpoint
from .siggen import Dataset, DatasetManifest, generate_dataset
from .train import TrainConfig, finetune, pretrain

log = logging.getLogger(__name__)

DESK_MANIFEST = dict(
    frame_length=1024, schemes=["BPSK", "QPSK", "16QAM", "4FSK"],
    snr_grid_db=list(range(-10, 21, 2)), frames_per_cell=1120, master_seed=2024,
    sps=64, rolloff=0.35, cfo_max=0.002, channel="awgn",
)
DESK_MODEL = dict(
    frame_length=1024, patch_size=8, enc_dim=64, enc_layers=4, enc_heads=2,
    dec_dim=32, dec_layers=2, dec_heads=2, mask_ratio=0.75, num_classes=4,
    dtype="float32", init_seed=0, weight_init="xavier_uniform",
)
DESK_PRETRAIN = dict(
    stage="pretrain", epochs=20, batch_size=32, base_lr=3e-3, warmup_frac=0.05,
    weight_decay=0.05, pretrain_snr_min_db=6.0, seed=0, val_max_frames=1024,
)
DESK_FINETUNE = dict(
    stage="finetune", epochs=30, batch_size=32, base_lr=1e-3, warmup_frac=0.1,
    weight_decay=0.0, label_fraction=0.01, seed=0, val_max_frames=1024,
)


def _dump(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, default=float)


def run_desk(out_dir, manifest=None, model=None, pretrain_cfg=None, finetune_cfg=None,
             reuse: bool = True) -> dict:
    """Run (or resume) the full desk pipeline; returns the summary dict.

    With ``reuse`` set, stages whose outputs already exist in ``out_dir``
    under the same resolved configuration are loaded instead of rerun.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    man = DatasetManifest(**{**DESK_MANIFEST, **(manifest or {})})
    mcfg = ModelConfig(**{**DESK_MODEL, **(model or {})})
    pcfg = TrainConfig(**{**DESK_PRETRAIN, **(pretrain_cfg or {})})
    fcfg = TrainConfig(**{**DESK_FINETUNE, **(finetune_cfg or {})})
    resolved = {"manifest": man.to_dict(), "model": mcfg.to_dict(),
                "pretrain": pcfg.to_dict(), "finetune": fcfg.to_dict()}
    digest = config_digest(resolved)
    resolved_path = out / "resolved_config.json"
    if reuse and resolved_path.exists():
        with open(resolved_path, encoding="utf-8") as fh:
            if config_digest(json.load(fh)) != digest:
                reuse = False
    _dump(resolved_path, resolved)

    ds_dir = out / "dataset"
    if not (reuse and (ds_dir / "manifest.json").exists()):
        t0 = time.perf_counter()
        generate_dataset(man, ds_dir)
        log.info("generated %d frames in %.1fs", man.num_frames, time.perf_counter() - t0)
    ds = Dataset(ds_dir)

    summary_path = out / "summary.json"
    summary = {}
    if reuse and summary_path.exists():
        with open(summary_path, encoding="utf-8") as fh:
            summary = json.load(fh)

    pre_dir = out / "pretrain"
    if not (reuse and "pretrain" in summary and (pre_dir / "params.json").exists()):
        model_ = RISMAE(mcfg, with_decoder=True, with_head=False)
        t0 = time.perf_counter()
        trace = pretrain(ds, model_, pcfg)
        summary["pretrain"] = {**trace.summary(), "seconds": time.perf_counter() - t0,
                               "loss_ratio": trace.epoch_means[-1] / trace.epoch_means[0]}
        trace.write_csv(out / "pretrain_trace.csv")
        save_checkpoint(model_, pre_dir, extra={"digest": digest})
        _dump(summary_path, summary)

    for name, src in (("finetune", pre_dir), ("scratch", None)):
        if reuse and name in summary:
            continue
        if src is None:
            clf = RISMAE(mcfg, with_decoder=False, with_head=True)
        else:
            clf = load_checkpoint(src, with_decoder=False, num_classes=ds.num_classes)
        t0 = time.perf_counter()
        trace = finetune(ds, clf, fcfg)
        trace.write_csv(out / f"{name}_trace.csv")
        report = evaluate_dataset(clf, ds, "ft_test", digest=digest)
        report.write(out / f"{name}_eval")
        save_checkpoint(clf, out / name, extra={"digest": digest})
        summary[name] = {
            **trace.summary(), "seconds": time.perf_counter() - t0,
            "labeled_frames": int(len(trace.selected_frames)),
            "oa": report.oa, "kappa": report.kappa,
            "oa_snr_ge_10": report.snr_slice_oa(snr_min=10),
            "oa_snr_ge_0": report.snr_slice_oa(snr_min=0),
            "oa_snr_le_0": report.snr_slice_oa(snr_max=0),
            "per_snr": report.per_snr,
        }
        _dump(summary_path, summary)
    summary["digest"] = digest
    _dump(summary_path, summary)
    return summary


if __name__ == "__main__":
    import sys

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    print(json.dumps(run_desk(sys.argv[1] if len(sys.argv) > 1 else "desk_run"), indent=1,
                     default=float))

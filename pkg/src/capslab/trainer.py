"""Training loops, matched-accuracy early stopping, seed repetition,
checkpointing, and report aggregation.

A run is fully determined by (plan, data options, seed): parameter init
draws from the seed, epoch shuffles derive from (seed, epoch), and
datasets derive from their own data seed, so reruns are bitwise
identical and a reloaded checkpoint continues the exact trajectory.
"""

import json
import struct
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import data as dpipe
from . import layers as ly
from . import metrics as mt
from . import models as mz
from .errors import ConfigError, DataError, NumericalAbort

TASKS = ("affnist", "multimnist")


@dataclass
class DataSpec:
    """Dataset options for one task (shared by every seed of a run)."""

    data_seed: int = 0
    mnist_dir: str = None
    train_count: int = 0          # 0 = one canvas per source digit
    pairs_per_image: int = 1      # overlapping-digit pairs per source digit
    test_pairs_per_image: int = 1
    affnist_variants: int = 1     # transformed variants per test digit


@dataclass
class TrainPlan:
    task: str
    config: mz.AblationConfig
    epochs_max: int = 30
    seeds: tuple = (0, 1, 2, 3, 4)
    early_stop_test_acc: float = None  # benchmark mode: 0.9922 matched accuracy
    eval_every: int = 0                # extra mid-epoch test evals every N steps
    checkpoint_every: int = 0          # epochs between checkpoints (0 = final only)
    batch_size: int = 128

    def validate(self):
        if self.task not in TASKS:
            raise ConfigError(f"task {self.task!r} not in {TASKS}")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.early_stop_test_acc is not None and not 0 < self.early_stop_test_acc < 1:
            raise ConfigError("early_stop_test_acc must lie in (0, 1)")
        if self.epochs_max < 1:
            raise ConfigError("epochs_max must be >= 1")
        return self


def build_task_datasets(task, data_spec, input_size):
    """Generate (train, eval dict) for a task; pure in the data seed."""
    if task == "affnist":
        tr_img, tr_lab = dpipe.load_source("train", data_spec.mnist_dir)
        te_img, te_lab = dpipe.load_source("test", data_spec.mnist_dir)
        count = data_spec.train_count or tr_img.shape[0]
        train = dpipe.gen_train_canvases(tr_img, tr_lab, count, data_spec.data_seed)
        evals = {
            "mnist_test": dpipe.gen_centered_canvases(te_img, te_lab),
            "affnist_test": dpipe.gen_affnist_test(
                te_img, te_lab, data_spec.data_seed, data_spec.affnist_variants
            ),
        }
        if input_size != train.side:
            raise ConfigError(f"model input {input_size} != canvas {train.side}")
        return train, evals
    tr_img, tr_lab = dpipe.load_source("train", data_spec.mnist_dir)
    te_img, te_lab = dpipe.load_source("test", data_spec.mnist_dir)
    train = dpipe.gen_multimnist(
        tr_img, tr_lab, data_spec.pairs_per_image, data_spec.data_seed, "train"
    )
    evals = {
        "multimnist_test": dpipe.gen_multimnist(
            te_img, te_lab, data_spec.test_pairs_per_image, data_spec.data_seed, "test"
        )
    }
    if input_size != train.side:
        raise ConfigError(f"model input {input_size} != canvas {train.side}")
    return train, evals


def _seed_rng(seed, tag):
    return np.random.default_rng(np.random.SeedSequence((int(seed), dpipe._tag_int(tag))))


def _param_norm_snapshot(params):
    return {name: float(np.linalg.norm(p.data)) for name, p in params.items()}


def evaluate_dataset(spec, dataset, batch_size=256):
    """Accuracy (or top-2 set accuracy for paired labels) over a dataset."""
    from . import autodiff as ad

    probs = np.zeros((len(dataset), spec.cfg.num_classes), dtype=np.float32)
    with ad.no_grad():
        for idx in dpipe.batch_iter(dataset, batch_size=batch_size, shuffle_seed=None):
            x = dataset.pixel_batch(idx)[:, None, :, :]
            probs[idx] = mz.forward(spec, x).probs
    if dataset.labels.ndim == 2:
        acc = mt.top2_multitarget_accuracy(probs, dataset.labels)
        per_class = {}
    else:
        acc = mt.accuracy(probs, dataset.labels)
        per_class = mt.per_class_accuracy(probs, dataset.labels, spec.cfg.num_classes)
    return mt.EvalResult(
        dataset_tag=dataset.tag, n_examples=len(dataset), accuracy=acc, per_class=per_class
    )


def train_one_seed(plan, train_ds, eval_sets, seed, run_dir=None, log=None):
    """Train a single seed; returns (records, spec, adam state)."""
    cfg = plan.config
    spec = mz.build_model(cfg)
    mz.init_params(spec, _seed_rng(seed, "init"))
    state = ly.adam_init(spec.params)
    records = []
    step = 0
    stopped = False
    for epoch in range(1, plan.epochs_max + 1):
        losses = []
        train_hits = 0
        for idx in dpipe.batch_iter(train_ds, plan.batch_size, shuffle_seed=seed, epoch=epoch):
            x = train_ds.pixel_batch(idx)[:, None, :, :]
            labels = train_ds.labels[idx]
            comps = train_ds.component_batch(idx)
            out = mz.forward(spec, x, labels=labels, recon_targets=comps)
            loss = float(out.loss.data)
            if not np.isfinite(loss):
                raise NumericalAbort(
                    f"non-finite loss at seed {seed} epoch {epoch} step {step}; "
                    f"parameter norms: {json.dumps(_param_norm_snapshot(spec.params))}"
                )
            losses.append(loss)
            if labels.ndim == 1:
                train_hits += int((out.probs.argmax(axis=1) == labels).sum())
            else:
                top2 = np.sort(np.argsort(-out.probs, axis=1, kind="stable")[:, :2], axis=1)
                train_hits += int(np.all(top2 == np.sort(labels, axis=1), axis=1).sum())
            for p in spec.params.values():
                p.zero_grad()
            out.loss.backward()
            ly.adam_step(spec.params, state)
            step += 1
            if plan.eval_every and step % plan.eval_every == 0:
                mid = {
                    f"{tag}_acc": evaluate_dataset(spec, ds).accuracy
                    for tag, ds in eval_sets.items()
                }
                records.append({"seed": seed, "epoch": epoch, "step": step, **mid})
        record = {
            "seed": seed,
            "epoch": epoch,
            "train_loss": float(np.mean(losses)),
            "train_acc": train_hits / len(train_ds),
        }
        for tag, ds in eval_sets.items():
            record[f"{tag}_acc"] = evaluate_dataset(spec, ds).accuracy
        records.append(record)
        if log:
            log(record)
        if run_dir and plan.checkpoint_every and epoch % plan.checkpoint_every == 0:
            save_checkpoint(
                Path(run_dir) / f"seed{seed}_epoch{epoch}.ckpt", spec, state, epoch, seed
            )
        primary = "mnist_test_acc" if "mnist_test_acc" in record else "multimnist_test_acc"
        if plan.early_stop_test_acc is not None and record[primary] >= plan.early_stop_test_acc:
            record["early_stopped"] = True
            stopped = True
            break
    if run_dir:
        save_checkpoint(Path(run_dir) / f"seed{seed}_final.ckpt", spec, state,
                        records[-1]["epoch"], seed)
    records[-1]["stopped_early"] = stopped
    return records, spec, state


def train(plan, data_spec=None, run_dir=None, log=None):
    """Run every seed of a plan; returns the aggregated RunReport."""
    plan.validate()
    data_spec = data_spec or DataSpec()
    train_ds, eval_sets = build_task_datasets(plan.task, data_spec, plan.config.input_size)
    if run_dir:
        run_dir = Path(run_dir)
        run_dir.mkdir(parents=True, exist_ok=True)
    per_seed = []
    all_records = []
    for seed in plan.seeds:
        records, _, _ = train_one_seed(plan, train_ds, eval_sets, seed, run_dir, log)
        finals = [r for r in records if "train_loss" in r]
        per_seed.append(finals[-1])
        all_records.extend(records)
    report = RunReport(
        task=plan.task,
        config=plan.config.to_dict(),
        plan={
            "epochs_max": plan.epochs_max,
            "seeds": list(plan.seeds),
            "early_stop_test_acc": plan.early_stop_test_acc,
            "batch_size": plan.batch_size,
            "eval_every": plan.eval_every,
            "checkpoint_every": plan.checkpoint_every,
            "data": asdict(data_spec),
        },
        records=all_records,
        per_seed_final=per_seed,
        summary=summarize(per_seed),
    )
    if run_dir:
        report.write_jsonl(run_dir / "report.jsonl")
    return report


def aggregate(values):
    """Mean and sample standard deviation (std omitted for single values)."""
    values = list(values)
    if not values:
        raise ValueError("aggregate needs at least one value")
    mean = float(np.mean(values))
    std = float(np.std(values, ddof=1)) if len(values) >= 2 else None
    return mean, std


def summarize(per_seed_finals):
    metric_keys = [
        k for k in per_seed_finals[0]
        if k.endswith("_acc") or k in ("train_loss", "train_acc")
    ]
    summary = {}
    for key in metric_keys:
        mean, std = aggregate([r[key] for r in per_seed_finals])
        summary[key] = {"mean": mean, "std": std}
    return summary


@dataclass
class RunReport:
    task: str
    config: dict
    plan: dict
    records: list
    per_seed_final: list
    summary: dict

    def write_jsonl(self, path):
        with open(path, "w") as f:
            for record in self.records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
            f.write(json.dumps({
                "final": True,
                "task": self.task,
                "config": self.config,
                "plan": self.plan,
                "per_seed_final": self.per_seed_final,
                "summary": self.summary,
            }, sort_keys=True) + "\n")
        return path

    @staticmethod
    def read_jsonl(path):
        lines = [json.loads(line) for line in open(path)]
        tail = lines[-1]
        if not tail.get("final"):
            raise DataError(f"{path}: missing final summary record")
        return RunReport(
            task=tail["task"],
            config=tail["config"],
            plan=tail["plan"],
            records=lines[:-1],
            per_seed_final=tail["per_seed_final"],
            summary=tail["summary"],
        )


# ---------------------------------------------------------------------------
# checkpoint format: magic CAPSCK01, 32-byte config fingerprint, then
# length-prefixed named records (u32 name_len, name, u8 dtype tag,
# u32 rank, u32 dims[], raw little-endian payload).

CKPT_MAGIC = b"CAPSCK01"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("u1")}


def _write_record(f, name, array):
    array = np.ascontiguousarray(array)
    for tag, dtype in _DTYPES.items():
        if array.dtype == dtype:
            array = array.astype(dtype, copy=False)
            break
    else:
        raise ValueError(f"unsupported checkpoint dtype {array.dtype} for {name!r}")
    name_b = name.encode()
    f.write(struct.pack("<I", len(name_b)))
    f.write(name_b)
    f.write(struct.pack("<B", tag))
    f.write(struct.pack("<I", array.ndim))
    f.write(struct.pack(f"<{array.ndim}I", *array.shape))
    f.write(array.tobytes())


def _read_record(f, path):
    head = f.read(4)
    if not head:
        return None
    (name_len,) = struct.unpack("<I", head)
    name = f.read(name_len).decode()
    (tag,) = struct.unpack("<B", f.read(1))
    (rank,) = struct.unpack("<I", f.read(4))
    dims = struct.unpack(f"<{rank}I", f.read(4 * rank)) if rank else ()
    dtype = _DTYPES.get(tag)
    if dtype is None:
        raise DataError(f"{path}: unknown dtype tag {tag} in record {name!r}")
    count = int(np.prod(dims)) if dims else 1
    payload = f.read(count * dtype.itemsize)
    if len(payload) != count * dtype.itemsize:
        raise DataError(f"{path}: truncated record {name!r}")
    return name, np.frombuffer(payload, dtype=dtype).reshape(dims)


def save_checkpoint(path, spec, state, epoch, seed):
    fingerprint = bytes.fromhex(mz.config_fingerprint(spec.cfg))
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(fingerprint)
        _write_record(f, "meta/config",
                      np.frombuffer(json.dumps(spec.cfg.to_dict(), sort_keys=True).encode(), dtype=np.uint8))
        _write_record(f, "meta/epoch", np.array(epoch, dtype=np.int64))
        _write_record(f, "meta/seed", np.array(seed, dtype=np.int64))
        _write_record(f, "adam/t", np.array(state.t, dtype=np.int64))
        for name in sorted(spec.params):
            _write_record(f, f"param/{name}", spec.params[name].data)
            _write_record(f, f"adam/m/{name}", state.m[name])
            _write_record(f, f"adam/v/{name}", state.v[name])
    return path


@dataclass
class Checkpoint:
    config: mz.AblationConfig
    fingerprint: str
    params: dict
    adam_m: dict
    adam_v: dict
    adam_t: int
    epoch: int
    seed: int


def load_checkpoint(path, expect_fingerprint=None):
    with open(path, "rb") as f:
        if f.read(8) != CKPT_MAGIC:
            raise DataError(f"{path}: not a CAPSCKPT v1 file")
        fingerprint = f.read(32).hex()
        records = {}
        while True:
            rec = _read_record(f, path)
            if rec is None:
                break
            records[rec[0]] = rec[1]
    cfg_dict = json.loads(records["meta/config"].tobytes().decode())
    cfg_dict["fc_widths"] = tuple(cfg_dict["fc_widths"]) if cfg_dict["fc_widths"] else None
    cfg = mz.AblationConfig(**cfg_dict)
    if mz.config_fingerprint(cfg) != fingerprint:
        raise DataError(f"{path}: config fingerprint mismatch with embedded config")
    if expect_fingerprint is not None and fingerprint != expect_fingerprint:
        raise DataError(
            f"{path}: fingerprint {fingerprint[:12]}... != expected {expect_fingerprint[:12]}..."
        )
    params = {k[len("param/"):]: v.copy() for k, v in records.items() if k.startswith("param/")}
    return Checkpoint(
        config=cfg,
        fingerprint=fingerprint,
        params=params,
        adam_m={k[len("adam/m/"):]: v.copy() for k, v in records.items() if k.startswith("adam/m/")},
        adam_v={k[len("adam/v/"):]: v.copy() for k, v in records.items() if k.startswith("adam/v/")},
        adam_t=int(records["adam/t"]),
        epoch=int(records["meta/epoch"]),
        seed=int(records["meta/seed"]),
    )


def spec_from_checkpoint(ckpt):
    """Rebuild a ready-to-run ModelSpec from a loaded checkpoint."""
    from .autodiff import Tensor

    spec = mz.build_model(ckpt.config)
    if set(ckpt.params) != set(spec.param_shapes):
        raise DataError("checkpoint parameter registry does not match the architecture")
    spec.params = {
        name: Tensor(ckpt.params[name].copy(), requires_grad=True) for name in spec.param_shapes
    }
    return spec


def resume_training(ckpt, plan, train_ds, eval_sets, run_dir=None):
    """Continue a checkpoint to plan.epochs_max; trajectory matches an
    uninterrupted run bitwise (epoch shuffles derive from (seed, epoch))."""
    spec = spec_from_checkpoint(ckpt)
    state = ly.AdamState(t=ckpt.adam_t,
                         m={k: v.copy() for k, v in ckpt.adam_m.items()},
                         v={k: v.copy() for k, v in ckpt.adam_v.items()})
    records = []
    step = 0
    for epoch in range(ckpt.epoch + 1, plan.epochs_max + 1):
        losses = []
        for idx in dpipe.batch_iter(train_ds, plan.batch_size, shuffle_seed=ckpt.seed, epoch=epoch):
            x = train_ds.pixel_batch(idx)[:, None, :, :]
            labels = train_ds.labels[idx]
            comps = train_ds.component_batch(idx)
            out = mz.forward(spec, x, labels=labels, recon_targets=comps)
            losses.append(float(out.loss.data))
            for p in spec.params.values():
                p.zero_grad()
            out.loss.backward()
            ly.adam_step(spec.params, state)
            step += 1
        record = {"seed": ckpt.seed, "epoch": epoch, "train_loss": float(np.mean(losses))}
        for tag, ds in eval_sets.items():
            record[f"{tag}_acc"] = evaluate_dataset(spec, ds).accuracy
        records.append(record)
    if run_dir:
        save_checkpoint(Path(run_dir) / f"seed{ckpt.seed}_final.ckpt", spec, state,
                        plan.epochs_max, ckpt.seed)
    return records, spec, state

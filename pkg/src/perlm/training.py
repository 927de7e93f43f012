"""Training loop: batching, schedule, checkpoints, evaluation, ablation suites.

Every random draw is derived statelessly from (seed, purpose, step/epoch),
so a run interrupted at a checkpoint continues bit-identically.
"""

from __future__ import annotations

import hashlib
import json
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .config import (RunConfig, apply_overrides, build_from_flat,
                     flatten_config, save_config)
from .data import GenerationStats, generate_instances, read_instances
from .errors import ConfigurationError, TrainingDivergenceError
from .model import EncoderState, init_encoder_state, packed_batch_loss
from .optim import (AdamState, LrSchedule, adam_step, clip_gradients_by_norm,
                    init_adam_state, lr_at)
from .seeding import derive_rng

EVAL_CHUNK = 32


@dataclass
class MetricsRecord:
    step: int
    loss: float
    position_accuracy: float
    learning_rate: float
    wall_time: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def metrics_equal(a: MetricsRecord, b: MetricsRecord) -> bool:
    """Equality on the deterministic fields (wall_time is excluded)."""
    return (a.step == b.step and a.loss == b.loss
            and a.position_accuracy == b.position_accuracy
            and a.learning_rate == b.learning_rate)


def read_metrics(path) -> list[MetricsRecord]:
    records = []
    with open(path, encoding="utf-8") as handle:
        for line in handle:
            line = line.strip()
            if line:
                records.append(MetricsRecord(**json.loads(line)))
    return records


def make_batches(instances: list, batch_size: int, max_len: int, *,
                 seed: int, epoch: int = 0) -> list[list]:
    """Deterministic shuffled batches; the final short batch is kept."""
    if not instances:
        raise ConfigurationError("cannot batch an empty instance stream")
    if batch_size < 1:
        raise ConfigurationError(f"batch_size must be >= 1, got {batch_size}")
    for instance in instances:
        if len(instance.input_ids) != max_len:
            raise ConfigurationError(
                f"instance length {len(instance.input_ids)} != max_len {max_len}")
    order = derive_rng(seed, "batch-order", epoch).permutation(len(instances))
    return [[instances[int(i)] for i in order[lo:lo + batch_size]]
            for lo in range(0, len(instances), batch_size)]


def evaluate(state: EncoderState, held_out_instances: list, mode: str, *,
             step: int = 0, learning_rate: float = 0.0,
             wall_time: float = 0.0) -> MetricsRecord:
    """Mean loss and argmax accuracy over all prediction rows, dropout off."""
    if not held_out_instances:
        raise ConfigurationError("evaluation set is empty")
    total_rows = 0
    total_loss = 0.0
    total_correct = 0
    for lo in range(0, len(held_out_instances), EVAL_CHUNK):
        chunk = held_out_instances[lo:lo + EVAL_CHUNK]
        loss, counts = packed_batch_loss(state, chunk, mode, training=False)
        total_loss += float(loss.data) * counts["rows"]
        total_rows += counts["rows"]
        total_correct += counts["correct"]
    if total_rows == 0:
        raise ConfigurationError("evaluation set has no prediction rows")
    return MetricsRecord(step=step, loss=total_loss / total_rows,
                         position_accuracy=total_correct / total_rows,
                         learning_rate=learning_rate, wall_time=wall_time)


# -- checkpoints --------------------------------------------------------------


def write_arrays(prefix, arrays: dict[str, np.ndarray], manifest: dict) -> str:
    """Manifest JSON plus one contiguous little-endian float64 array file."""
    prefix = Path(prefix)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    manifest_arrays = []
    offset = 0
    chunks = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f8")
        manifest_arrays.append({"name": name, "shape": list(arr.shape),
                                "offset": offset, "size": int(arr.size)})
        chunks.append(arr.tobytes())
        offset += arr.size
    blob = b"".join(chunks)
    manifest = dict(manifest)
    manifest["arrays"] = manifest_arrays
    manifest["sha256"] = hashlib.sha256(blob).hexdigest()
    with open(f"{prefix}.bin", "wb") as handle:
        handle.write(blob)
    with open(f"{prefix}.json", "w", encoding="utf-8") as handle:
        json.dump(manifest, handle, indent=1, sort_keys=True)
        handle.write("\n")
    return str(prefix)


def read_arrays(prefix) -> tuple[dict[str, np.ndarray], dict]:
    with open(f"{prefix}.json", encoding="utf-8") as handle:
        manifest = json.load(handle)
    with open(f"{prefix}.bin", "rb") as handle:
        blob = handle.read()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ConfigurationError(f"checkpoint {prefix} is corrupt (sha mismatch)")
    flat = np.frombuffer(blob, dtype="<f8")
    arrays = {}
    for spec in manifest["arrays"]:
        chunk = flat[spec["offset"]:spec["offset"] + spec["size"]]
        arrays[spec["name"]] = chunk.reshape(spec["shape"]).copy()
    return arrays, manifest


def save_checkpoint(prefix, state: EncoderState, adam: AdamState, step: int,
                    run: RunConfig) -> str:
    arrays: dict[str, np.ndarray] = {}
    for name, p in state.params.items():
        arrays[f"param.{name}"] = p.data
    for name, m in adam.m.items():
        arrays[f"adam.m.{name}"] = m
    for name, v in adam.v.items():
        arrays[f"adam.v.{name}"] = v
    manifest = {
        "format": "perlm-checkpoint",
        "version": 1,
        "step": step,
        "adam": {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2,
                 "epsilon": adam.epsilon,
                 "weight_decay_rate": adam.weight_decay_rate},
        "config": {k: (list(v) if isinstance(v, tuple) else v)
                   for k, v in flatten_config(run).items()},
    }
    return write_arrays(prefix, arrays, manifest)


def load_checkpoint(prefix) -> tuple[EncoderState, AdamState, int, RunConfig]:
    arrays, manifest = read_arrays(prefix)
    run = build_from_flat(manifest["config"])
    state = EncoderState(config=run.model)
    adam = AdamState(step=manifest["adam"]["step"],
                     beta1=manifest["adam"]["beta1"],
                     beta2=manifest["adam"]["beta2"],
                     epsilon=manifest["adam"]["epsilon"],
                     weight_decay_rate=manifest["adam"]["weight_decay_rate"])
    for name, arr in arrays.items():
        if name.startswith("param."):
            state.params[name[len("param."):]] = Tensor(arr, requires_grad=True)
        elif name.startswith("adam.m."):
            adam.m[name[len("adam.m."):]] = arr
        elif name.startswith("adam.v."):
            adam.v[name[len("adam.v."):]] = arr
    return state, adam, manifest["step"], run


# -- the training loop ---------------------------------------------------------


def train(run: RunConfig, train_instances: list | None = None,
          eval_instances: list | None = None, *,
          stop_after: int | None = None,
          resume_from: str | None = None,
          log=None) -> tuple[EncoderState, list[MetricsRecord]]:
    """Run the optimizer for total_steps, logging metrics and checkpoints.

    ``stop_after`` ends the run early (after checkpointing) so that a later
    call with ``resume_from`` can continue it bit-identically.
    """
    if train_instances is None:
        if not run.train_instances:
            raise ConfigurationError("no training instances configured")
        train_instances = read_instances(run.train_instances)
    if eval_instances is None:
        eval_instances = (read_instances(run.eval_instances)
                          if run.eval_instances else train_instances)
    if not train_instances:
        raise ConfigurationError("training instance stream is empty")

    out_dir = Path(run.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    checkpoint_dir = out_dir / "checkpoints"
    mode = run.masking.prediction_space
    schedule = LrSchedule(peak_lr=run.peak_lr, warmup_steps=run.warmup_steps,
                          total_steps=run.total_steps)

    if resume_from is not None:
        state, adam, start_step, _ = load_checkpoint(resume_from)
        metrics_path = out_dir / "metrics.jsonl"
        records: list[MetricsRecord] = []
        metrics_handle = open(metrics_path, "a", encoding="utf-8")
    else:
        state = init_encoder_state(run.model, derive_rng(run.seed, "params"))
        adam = init_adam_state(state.params, beta1=run.adam_beta1,
                               beta2=run.adam_beta2, epsilon=run.adam_epsilon,
                               weight_decay_rate=run.weight_decay_rate)
        start_step = 0
        save_config(run, out_dir / "config.json")
        metrics_path = out_dir / "metrics.jsonl"
        metrics_handle = open(metrics_path, "w", encoding="utf-8")
        records = []

    started = time.monotonic()
    last_checkpoint: str | None = resume_from

    def record_eval(step: int):
        rec = evaluate(state, eval_instances, mode, step=step,
                       learning_rate=lr_at(schedule, step),
                       wall_time=time.monotonic() - started)
        records.append(rec)
        metrics_handle.write(rec.to_json() + "\n")
        metrics_handle.flush()
        if log:
            log(f"step {rec.step}: loss {rec.loss:.4f} "
                f"acc {rec.position_accuracy:.4f} lr {rec.learning_rate:.2e}")
        return rec

    batches_per_epoch = math.ceil(len(train_instances) / run.batch_size)
    epoch_cache: tuple[int, list] | None = None
    end_step = min(run.total_steps, stop_after or run.total_steps)

    try:
        if start_step == 0:
            record_eval(0)
        for step in range(start_step + 1, end_step + 1):
            epoch = (step - 1) // batches_per_epoch
            if epoch_cache is None or epoch_cache[0] != epoch:
                epoch_cache = (epoch, make_batches(
                    train_instances, run.batch_size, run.max_len,
                    seed=run.seed, epoch=epoch))
            batch = epoch_cache[1][(step - 1) % batches_per_epoch]

            rng = derive_rng(run.seed, "step", step)
            state.zero_grads()
            loss, _ = packed_batch_loss(state, batch, mode, rng=rng,
                                        training=True)
            if not np.isfinite(loss.data):
                raise TrainingDivergenceError(
                    f"non-finite loss at step {step}", last_checkpoint)
            loss.backward()
            grads = state.grads()
            if run.clip_norm > 0:
                clip_gradients_by_norm(grads, run.clip_norm)
            adam_step(state.params, grads, adam, lr_at(schedule, step))

            if step % run.eval_every == 0 or step == end_step:
                record_eval(step)
            if step % run.checkpoint_every == 0 or step == end_step:
                last_checkpoint = save_checkpoint(
                    checkpoint_dir / f"step-{step:08d}", state, adam, step, run)
    except TrainingDivergenceError:
        metrics_handle.close()
        raise
    metrics_handle.close()
    return state, records


# -- ablation suites -----------------------------------------------------------

GRANULARITY_SUITE = {
    "none": {"masking.granularity": "none"},
    "word": {"masking.granularity": "word"},
    "ngram": {"masking.granularity": "ngram"},
    "sentence": {"masking.granularity": "sentence"},
}
PREDICTION_SPACE_SUITE = {
    "local": {"masking.prediction_space": "local"},
    "global": {"masking.prediction_space": "global"},
    "local+global": {"masking.prediction_space": "local+global"},
}
SCOPE_SUITE = {
    "partial": {"masking.prediction_scope": "partial"},
    "full": {"masking.prediction_scope": "full"},
}
ABLATION_SUITES = {
    "granularity": GRANULARITY_SUITE,
    "prediction_space": PREDICTION_SPACE_SUITE,
    "prediction_scope": SCOPE_SUITE,
}


def run_ablation_suite(base: RunConfig, variants: dict[str, dict], *,
                       documents: list, vocab, duplicate_factor: int = 1,
                       log=None) -> list[dict]:
    """Train every variant with identical seed and steps; tabulate results.

    Variants may only change masking/head settings; anything touching the
    model dimensions is rejected as not comparable. Instances are
    regenerated per variant because masking settings shape the data itself.
    """
    for name, overrides in variants.items():
        bad = [k for k in overrides if not k.startswith("masking.")]
        if bad:
            raise ConfigurationError(
                f"variant {name!r} changes non-masking keys {bad}; "
                f"results would not be comparable")
    rows = []
    base_out = Path(base.out_dir)
    for name, overrides in variants.items():
        run = apply_overrides(base, overrides)
        run = apply_overrides(run, {"out_dir": str(base_out / name)})
        stats = GenerationStats()
        instances = list(generate_instances(documents, vocab, run.masking,
                                            run.max_len, seed=run.seed,
                                            stats=stats))
        if log:
            log(f"[{name}] {len(instances)} instances")
        _, records = train(run, train_instances=instances, log=log)
        first, last = records[0], records[-1]
        rows.append({
            "variant": name,
            "overrides": overrides,
            "instances": len(instances),
            "initial_loss": first.loss,
            "final_loss": last.loss,
            "final_accuracy": last.position_accuracy,
            "loss_delta": last.loss - first.loss,
        })
    return rows


def format_ablation_table(rows: list[dict]) -> str:
    header = f"{'variant':<16} {'init loss':>10} {'final loss':>11} " \
             f"{'delta':>9} {'final acc':>10}"
    lines = [header, "-" * len(header)]
    for row in rows:
        lines.append(f"{row['variant']:<16} {row['initial_loss']:>10.4f} "
                     f"{row['final_loss']:>11.4f} {row['loss_delta']:>9.4f} "
                     f"{row['final_accuracy']:>10.4f}")
    return "\n".join(lines)

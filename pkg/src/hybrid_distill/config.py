"""Run configuration: one INI-style key/value file, validated against a fixed schema.

Every key has a type and a default; unknown sections or keys are errors, so a typo can
never silently fall back to a default. ``SCHEMA`` below is the documentation.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from pathlib import Path

from .distill import StagePlan, TrainConfig
from .model import ModelConfig
from .taskgen import TaskParams


class ConfigError(ValueError):
    pass


def _int_list(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _str_list(s: str) -> tuple[str, ...]:
    return tuple(x for x in s.replace(",", " ").split())


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none", "default") else int(s)


# section -> key -> (parser, default, doc)
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, 0, "master seed; --seed overrides"),
        "out": (str, "runs/default", "output directory; --out or HYBRID_DISTILL_OUT override"),
    },
    "model": {
        "n_layers": (int, 4, "decoder layers"),
        "n_heads": (int, 8, "mixer heads per layer"),
        "d_model": (int, 64, "residual width; d_head = d_model / n_heads"),
        "max_T": (int, 64, "longest sequence the position table covers"),
        "mlp_mult": (int, 4, "MLP hidden width multiplier"),
        "d_state": (_opt_int, None, "SSM state size of students ('none' = d_head)"),
    },
    "task": {
        "n_keys": (int, 24, "distinct key tokens"),
        "n_values": (int, 24, "distinct value tokens"),
        "min_pairs": (int, 4, "probe rows hold [min_pairs, max_pairs] pairs"),
        "max_pairs": (int, 12, "upper bound on pairs per row"),
        "train_min_pairs": (int, 1, "training rows hold [train_min_pairs, max_pairs] pairs"),
        "seq_len": (int, 51, "filler row length"),
        "filler_order": (int, 1, "Markov order of the filler chain"),
        "chain_seed": (int, 0, "seed of the filler transition table"),
    },
    "teacher": {
        "steps": (int, 3500, "optimizer steps"),
        "batch_size": (int, 64, "rows per step"),
        "peak_lr": (float, 1e-3, "WSD plateau learning rate"),
        "mixture_ratio": (float, 0.75, "fraction of retrieval rows per batch"),
        "log_every": (int, 50, "trace row interval"),
        "eval_every": (int, 250, "probe/perplexity interval"),
        "target_acc": (float, 0.95, "probe accuracy counted as converged"),
        "dtype": (str, "float32", "training compute dtype (float32 | float64); checkpoints are float64"),
    },
    "distill": {
        "orient_steps": (int, 0, "matrix-orientation steps (0 skips the stage)"),
        "orient_lr": (float, 3e-3, "orientation peak lr"),
        "align_steps": (int, 100, "hidden-state alignment steps"),
        "align_lr": (float, 3e-3, "alignment peak lr"),
        "kd_steps": (int, 250, "logit-distillation steps"),
        "kd_lr": (float, 1e-3, "KD peak lr"),
        "batch_size": (int, 32, "rows per step"),
        "mixture_ratio": (float, 0.5, "fraction of retrieval rows per batch"),
        "log_every": (int, 25, "trace row interval"),
        "eval_every": (int, 175, "probe/perplexity interval"),
        "dtype": (str, "float32", "training compute dtype (float32 | float64); checkpoints are float64"),
    },
    "placement": {
        "strategy": (str, "retrieval_aware", "retrieval_aware | fixed_interleave | annealed | random"),
        "budget": (int, 4, "attention heads kept (retrieval_aware, random)"),
        "stride": (int, 2, "fixed_interleave layer stride"),
        "offset": (int, 0, "fixed_interleave first layer"),
    },
    "eval": {
        "probe_size": (int, 512, "retrieval probe rows"),
        "probe_seed": (int, 1234, "probe generator seed (independent of training data)"),
        "ppl_size": (int, 128, "rows in the perplexity batch (half retrieval, half filler)"),
        "memory_L": (int, 64, "context length used for toy memory figures"),
    },
    "sweep": {
        "kind": (str, "k", "k | d_state | placement"),
        "ks": (_int_list, (0, 2, 4, 8, 32), "head budgets for the k sweep"),
        "d_states": (_int_list, (8, 4, 2), "state sizes for the d_state sweep"),
        "seeds": (_int_list, (0, 1, 2), "distillation seeds per sweep point"),
        "strategies": (_str_list, ("retrieval_aware", "random", "fixed_interleave"), "placement sweep strategies"),
    },
    "memory": {
        "lengths": (_int_list, (128, 2048, 4096), "context lengths of the memory report"),
        "specs": (str, "reference", "reference | toy"),
    },
}


@dataclass(frozen=True)
class RunConfig:
    seed: int
    out: str
    model: ModelConfig
    task: TaskParams
    teacher: TrainConfig
    teacher_target: float
    distill: TrainConfig
    plan: StagePlan
    placement: dict
    eval: dict
    sweep: dict
    memory: dict
    raw: dict = field(default_factory=dict, compare=False, repr=False)

    @property
    def student_d_state(self) -> int | None:
        return self.raw["model"]["d_state"]


def _parse_values(raw_sections: dict[str, dict[str, str]], source: str) -> dict[str, dict]:
    values = {sec: {k: spec[1] for k, spec in keys.items()} for sec, keys in SCHEMA.items()}
    for sec, items in raw_sections.items():
        if sec not in SCHEMA:
            raise ConfigError(f"{source}: unknown section [{sec}] (known: {', '.join(SCHEMA)})")
        for key, text in items.items():
            if key not in SCHEMA[sec]:
                raise ConfigError(f"{source}: unknown key '{key}' in [{sec}]")
            parser = SCHEMA[sec][key][0]
            try:
                values[sec][key] = parser(text)
            except ValueError as exc:
                raise ConfigError(f"{source}: [{sec}] {key} = {text!r}: {exc}") from exc
    return values


def build_run_config(values: dict[str, dict]) -> RunConfig:
    m, t, te, di = values["model"], values["task"], values["teacher"], values["distill"]
    try:
        task = TaskParams(**t)
        model = ModelConfig(n_layers=m["n_layers"], n_heads=m["n_heads"], d_model=m["d_model"],
                            vocab_size=task.vocab.size, max_T=m["max_T"], mlp_mult=m["mlp_mult"])
        if max(task.max_kv_len, task.seq_len) > model.max_T:
            raise ConfigError(f"rows of up to {max(task.max_kv_len, task.seq_len)} tokens exceed max_T={model.max_T}")
        teacher = TrainConfig(total_steps=te["steps"], batch_size=te["batch_size"], peak_lr=te["peak_lr"],
                              mixture_ratio=te["mixture_ratio"], log_every=te["log_every"],
                              eval_every=te["eval_every"], seed=values["run"]["seed"], dtype=te["dtype"])
        distill = TrainConfig(total_steps=max(1, di["align_steps"] + di["kd_steps"] + di["orient_steps"]),
                              batch_size=di["batch_size"], peak_lr=max(di["align_lr"], di["kd_lr"]),
                              mixture_ratio=di["mixture_ratio"], log_every=di["log_every"],
                              eval_every=di["eval_every"], seed=values["run"]["seed"], dtype=di["dtype"])
        plan = StagePlan.default(align_steps=di["align_steps"], kd_steps=di["kd_steps"], align_lr=di["align_lr"],
                                 kd_lr=di["kd_lr"], orient_steps=di["orient_steps"], orient_lr=di["orient_lr"])
        if m["d_state"] is not None and m["d_state"] < 1:
            raise ConfigError("d_state must be >= 1")
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if values["sweep"]["kind"] not in ("k", "d_state", "placement"):
        raise ConfigError(f"[sweep] kind must be k, d_state or placement, got {values['sweep']['kind']!r}")
    if values["memory"]["specs"] not in ("reference", "toy"):
        raise ConfigError(f"[memory] specs must be reference or toy, got {values['memory']['specs']!r}")
    return RunConfig(seed=values["run"]["seed"], out=values["run"]["out"], model=model, task=task,
                     teacher=teacher, teacher_target=te["target_acc"], distill=distill, plan=plan,
                     placement=dict(values["placement"]), eval=dict(values["eval"]),
                     sweep=dict(values["sweep"]), memory=dict(values["memory"]), raw=values)


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__unused__")
    parser.optionxform = str  # keys are case-sensitive
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    raw = {sec: dict(parser[sec]) for sec in parser.sections()}
    return build_run_config(_parse_values(raw, source))


def load_config(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    """Read ``path`` (or only defaults when ``None``) and apply ``{"section.key": value}`` overrides."""
    text = ""
    source = "<defaults>"
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise FileNotFoundError(f"cannot read config file {path}: {exc.strerror}") from exc
        source = str(path)
    run = parse_config_text(text, source)
    if overrides:
        values = {sec: dict(v) for sec, v in run.raw.items()}
        for dotted, value in overrides.items():
            sec, key = dotted.split(".")
            values[sec][key] = value
        run = build_run_config(values)
    return run


def default_config() -> RunConfig:
    return load_config(None)


def schema_text() -> str:
    """The documented schema as an example config file (every key at its default)."""
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append(f"[{sec}]")
        for key, (_, default, doc) in keys.items():
            if isinstance(default, tuple):
                default = ", ".join(str(x) for x in default)
            lines.append(f"# {doc}")
            lines.append(f"{key} = {'none' if default is None else default}")
        lines.append("")
    return "\n".join(lines)

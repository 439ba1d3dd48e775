"""Layered run configuration.

Resolution order: schema defaults -> named preset -> config file -> dotted
command-line overrides. Unknown keys are rejected, and the fully resolved
config is echoed into every output directory so a run can be reproduced from
its artifacts alone.
"""

from __future__ import annotations

import os

from .data import BatchSpec, ConfigurationError, SplitProtocol, SynthSpec, synthetic_protocol
from .network import ScnConfig
from .trainer import TripletConfig


def _bool(s):
    if isinstance(s, bool):
        return s
    if str(s).lower() in ("true", "1", "yes", "on"):
        return True
    if str(s).lower() in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s):
    if isinstance(s, (tuple, list)):
        return tuple(int(x) for x in s)
    return tuple(int(x) for x in str(s).split(",") if x.strip() != "")


def _drops(s):
    """'3000:1e-4,4500:1e-5' -> ((3000, 1e-4), (4500, 1e-5))."""
    if isinstance(s, tuple):
        return s
    out = []
    for part in str(s).split(","):
        part = part.strip()
        if not part:
            continue
        step, lr = part.split(":")
        out.append((int(step), float(lr)))
    return tuple(out)


SCHEMA = {
    "seed": (int, 0),
    "dtype": (str, "float32"),
    "model.channels": (_int_list, (8, 16, 32)),
    "model.input_h": (int, 64),
    "model.input_w": (int, 44),
    "bie.template": (str, "static_excl_mean"),
    "bie.fusion": (str, "adaptive"),
    "bie.stages": (int, 0b111),
    "mfa.enabled": (_bool, True),
    "mfa.window_len": (int, 7),
    "mfa.within_window": (str, "max"),
    "mfa.final_reduce": (str, "max"),
    "train.iterations": (int, 5000),
    "train.p": (int, 2),
    "train.k": (int, 2),
    "train.segment_len": (int, 8),
    "train.margin": (float, 0.2),
    "train.normalization": (str, "paper_2M"),
    "train.sign_convention": (str, "standard"),
    "train.schedule": (str, "custom"),
    "train.lr": (float, 1e-3),
    "train.lr_drops": (_drops, ((3000, 1e-4),)),
    "train.checkpoint_every": (int, 1000),
    "train.log_every": (int, 50),
    "data.root": (str, "data/synth"),
    "data.protocol": (str, "synthetic"),
    "data.train_subjects": (int, 0),  # 0 = protocol default
    "data.probe_runs": (_int_list, (5, 8)),
    "synth.subjects": (int, 20),
    "synth.views": (_int_list, (0, 30, 60, 90)),
    "synth.sequences": (int, 8),
    "synth.frames": (int, 40),
    "synth.noise": (float, 0.0),
    "eval.exclude_identical_view": (_bool, True),
    "eval.gallery_equals_probe": (_bool, False),
}

# The default values above are the desk-scale regime: a fresh checkout can
# generate data, train, and evaluate in minutes on a laptop CPU.
PRESETS = {
    "desk": {},
    "casia-b": {
        "dtype": "float64",
        "model.channels": "32,64,128",
        "train.iterations": 150_000,
        "train.p": 8,
        "train.k": 6,
        "train.segment_len": 30,
        "train.schedule": "casia_b",
        "train.checkpoint_every": 10_000,
        "data.protocol": "casia_b",
        "data.root": "data/casia-b",
    },
    "ou-mvlp": {
        "dtype": "float64",
        "model.channels": "64,128,256",
        "train.iterations": 300_000,
        "train.p": 6,
        "train.k": 4,
        "train.segment_len": 30,
        "train.schedule": "ou_mvlp",
        "train.checkpoint_every": 10_000,
        "data.protocol": "ou_mvlp",
        "data.root": "data/ou-mvlp",
    },
}


class RunConfig:
    def __init__(self, values: dict):
        self.values = values

    def __getitem__(self, key):
        return self.values[key]

    def scn_config(self) -> ScnConfig:
        v = self.values
        return ScnConfig(
            channels=tuple(v["model.channels"]),
            input_hw=(v["model.input_h"], v["model.input_w"]),
            template=v["bie.template"],
            fusion=v["bie.fusion"],
            bie_stages=v["bie.stages"],
            window_len=v["mfa.window_len"],
            within_window=v["mfa.within_window"],
            final_reduce=v["mfa.final_reduce"],
            mfa_enabled=v["mfa.enabled"],
            dtype=v["dtype"],
        )

    def batch_spec(self) -> BatchSpec:
        v = self.values
        return BatchSpec(p=v["train.p"], k=v["train.k"], segment_len=v["train.segment_len"])

    def triplet_config(self) -> TripletConfig:
        v = self.values
        return TripletConfig(
            margin=v["train.margin"],
            normalization=v["train.normalization"],
            sign_convention=v["train.sign_convention"],
        )

    def custom_schedule(self):
        drops = tuple(self.values["train.lr_drops"])
        table = []
        lr = self.values["train.lr"]
        for step, next_lr in drops:
            table.append((step, lr))
            lr = next_lr
        table.append((None, lr))
        return tuple(table)

    def synth_spec(self) -> SynthSpec:
        v = self.values
        return SynthSpec(
            subjects=v["synth.subjects"],
            views=tuple(v["synth.views"]),
            sequences=v["synth.sequences"],
            frames=v["synth.frames"],
            noise_rate=v["synth.noise"],
            seed=v["seed"],
        )

    def protocol(self) -> SplitProtocol:
        v = self.values
        kind = v["data.protocol"]
        if kind == "casia_b":
            return SplitProtocol(train_subjects=v["data.train_subjects"] or 74)
        if kind == "synthetic":
            train = v["data.train_subjects"] or max(1, int(round(v["synth.subjects"] * 0.7)))
            return synthetic_protocol(train_subjects=train, probe_runs=tuple(v["data.probe_runs"]))
        if kind == "ou_mvlp":
            return SplitProtocol(train_subjects=v["data.train_subjects"] or 5153)
        raise ConfigurationError(f"unknown data.protocol {kind!r}")

    def echo(self, out_dir):
        os.makedirs(str(out_dir), exist_ok=True)
        path = os.path.join(str(out_dir), "config.echo")
        with open(path, "w") as fh:
            for key in sorted(self.values):
                val = self.values[key]
                if isinstance(val, tuple):
                    val = ",".join(
                        f"{a}:{b}" if isinstance(a, int) and isinstance(b, float) else str(a)
                        for a, b in val
                    ) if val and isinstance(val[0], tuple) else ",".join(str(x) for x in val)
                fh.write(f"{key} = {val}\n")
        return path


def parse_config_file(path) -> dict:
    out = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            out[key] = val
    return out


def load_config(preset: str | None = None, config_file=None, overrides=(),
                seed: int | None = None) -> RunConfig:
    values = {k: default for k, (_, default) in SCHEMA.items()}
    layers = []
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigurationError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        layers.append(PRESETS[preset])
    if config_file is not None:
        layers.append(parse_config_file(config_file))
    cli_layer = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override {item!r} is not key=value")
        key, val = (s.strip() for s in item.split("=", 1))
        cli_layer[key] = val
    layers.append(cli_layer)
    for layer in layers:
        for key, raw in layer.items():
            if key not in SCHEMA:
                raise ConfigurationError(f"unknown config key {key!r}")
            parse, _ = SCHEMA[key]
            try:
                values[key] = parse(raw)
            except (ValueError, TypeError) as exc:
                raise ConfigurationError(f"bad value for {key}: {raw!r} ({exc})")
    if seed is not None:
        values["seed"] = int(seed)
    return RunConfig(values)

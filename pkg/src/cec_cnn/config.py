"""Run configuration: INI file with [run], [data], [arch], [train], [eval], [erf] sections.

Every command writes the fully resolved configuration next to its outputs
(``config.resolved.ini``); rerunning with ``--config`` on that file
reproduces the run.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

from .arch import ArchitectureSpec, default_resolutions
from .data import ClassParams, ClassWeights
from .training import TrainConfig

RESOLVED_NAME = "config.resolved.ini"


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs/default"
    threads: int = 1
    deterministic: bool = True
    data_dir: str = "data"
    num_patients: int = 8
    rois_per_patient: int = 40
    class_params: ClassParams = field(default_factory=ClassParams)
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    split_fraction: float = 0.7
    checkpoint_every: int = 10
    class_weights: str = "auto"  # "auto" or "<cancer>,<non_cancer>"
    repeats: int = 20
    erf_runs: int = 100

    @property
    def weights(self) -> Optional[ClassWeights]:
        if self.class_weights.strip().lower() == "auto":
            return None
        cancer, non_cancer = (float(v) for v in self.class_weights.split(","))
        return ClassWeights(cancer=cancer, non_cancer=non_cancer)

    def train_config(self) -> TrainConfig:
        return replace(self.train, seed=self.seed, input_size=self.arch.input_size, class_weights=self.weights)

    # -- INI round trip ---------------------------------------------------
    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"seed": str(self.seed), "out": self.out, "threads": str(self.threads),
                     "deterministic": str(self.deterministic).lower()}
        data = {"dir": self.data_dir, "num_patients": str(self.num_patients),
                "rois_per_patient": str(self.rois_per_patient)}
        data.update({f.name: repr(getattr(self.class_params, f.name)) for f in fields(ClassParams)})
        cp["data"] = data
        arch = configparser.ConfigParser()
        arch.read_string(self.arch.to_ini())
        cp["arch"] = dict(arch["arch"])
        t = self.train
        cp["train"] = {"learning_rate": repr(t.learning_rate), "momentum": repr(t.momentum),
                       "lr_factor": repr(t.lr_factor), "plateau_patience": str(t.plateau_patience),
                       "epochs": str(t.epochs), "batch_size": str(t.batch_size), "augment": str(t.augment).lower(),
                       "class_weights": self.class_weights, "split_fraction": repr(self.split_fraction),
                       "checkpoint_every": str(self.checkpoint_every)}
        cp["eval"] = {"repeats": str(self.repeats)}
        cp["erf"] = {"runs": str(self.erf_runs)}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str) -> "RunConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        cfg = cls()
        if cp.has_section("run"):
            s = cp["run"]
            cfg.seed = s.getint("seed", cfg.seed)
            cfg.out = s.get("out", cfg.out)
            cfg.threads = s.getint("threads", cfg.threads)
            cfg.deterministic = s.getboolean("deterministic", cfg.deterministic)
        if cp.has_section("data"):
            s = cp["data"]
            cfg.data_dir = s.get("dir", cfg.data_dir)
            cfg.num_patients = s.getint("num_patients", cfg.num_patients)
            cfg.rois_per_patient = s.getint("rois_per_patient", cfg.rois_per_patient)
            kw = {}
            for f in fields(ClassParams):
                if f.name in s:
                    kw[f.name] = (int if f.type in ("int", int) else float)(s[f.name])
            cfg.class_params = ClassParams(**kw)
        if cp.has_section("arch"):
            cfg.arch = ArchitectureSpec.from_section(cp["arch"])
        if cp.has_section("train"):
            s = cp["train"]
            t = cfg.train
            cfg.train = replace(
                t,
                learning_rate=s.getfloat("learning_rate", t.learning_rate),
                momentum=s.getfloat("momentum", t.momentum),
                lr_factor=s.getfloat("lr_factor", t.lr_factor),
                plateau_patience=s.getint("plateau_patience", t.plateau_patience),
                epochs=s.getint("epochs", t.epochs),
                batch_size=s.getint("batch_size", t.batch_size),
                augment=s.getboolean("augment", t.augment),
            )
            cfg.class_weights = s.get("class_weights", cfg.class_weights)
            cfg.split_fraction = s.getfloat("split_fraction", cfg.split_fraction)
            cfg.checkpoint_every = s.getint("checkpoint_every", cfg.checkpoint_every)
        if cp.has_section("eval"):
            cfg.repeats = cp["eval"].getint("repeats", cfg.repeats)
        if cp.has_section("erf"):
            cfg.erf_runs = cp["erf"].getint("runs", cfg.erf_runs)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        return cls.from_ini(Path(path).read_text())

    def set_input_size(self, size: int) -> None:
        a = self.arch
        self.arch = ArchitectureSpec(a.input_channels, size, a.stem_channels, default_resolutions(size),
                                     a.resblocks_per_stage, a.num_parts, a.num_classes)

    def write_resolved(self, directory) -> Path:
        path = Path(directory) / RESOLVED_NAME
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_ini())
        return path

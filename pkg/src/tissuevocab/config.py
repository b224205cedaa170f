"""Run configuration: one flat TOML file, overridable key by key.

Every key is optional; missing keys take the defaults below. Relative paths
are resolved against the config file's directory.

==========================  =========================================================
key                         meaning
==========================  =========================================================
manifest                    cohort manifest (JSON); ``synth`` writes it here
out_dir                     directory for every stage output
patch_size                  patch side s
stride                      in-plane stride of the dense encoding grid
n_patches                   training patches M per clustering unit
clusters                    K per sequence (signature fusion)
clusters_fused              K for the channel-stacked unit (image fusion)
lam                         weight of the clustering loss
pretrain_epochs, epochs     autoencoder pretraining / joint training epochs
batch_size, lr, momentum    optimiser settings
fusion                      "SF" (signature fusion) or "IF" (image fusion)
sequences                   sequence order; fixes the fused-signature layout
reference                   reference sequence for image fusion (default: first)
register                    rigidly register follow-up to baseline for transitions
phenotypes                  P, number of signature phenotypes (5..10)
n_perm                      permutation replicates
folds                       cross-validation folds
low_max_grade               grades <= this are "low" in binary grade prediction
n_trees                     trees per random forest
incidence_threshold         per-subject frequency above which a transition "occurs"
seed                        root seed for every random stream
threads                     worker/BLAS threads (not part of the config hash)
synth_per_arm               synthetic cohort: subjects per arm
synth_dims                  synthetic cohort: volume dims
synth_regions               synthetic cohort: tissue regions per subject
==========================  =========================================================
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Iterable

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigInvalid

THREADS_ENV = "TISSUEVOCAB_THREADS"
_UNHASHED = {"threads", "out_dir"}


@dataclass(frozen=True)
class RunConfig:
    manifest: str = "cohort/manifest.json"
    out_dir: str = "out"
    patch_size: int = 32
    stride: int = 16
    n_patches: int = 20000
    clusters: int = 5
    clusters_fused: int = 20
    lam: float = 0.5
    pretrain_epochs: int = 50
    epochs: int = 100
    batch_size: int = 256
    lr: float = 1e-3
    momentum: float = 0.9
    fusion: str = "SF"
    sequences: tuple[str, ...] = ("t1w", "dixon", "sixecho")
    reference: str = ""
    register: bool = True
    phenotypes: int = 7
    n_perm: int = 10000
    folds: int = 5
    low_max_grade: int = 1
    n_trees: int = 500
    incidence_threshold: float = 0.0
    seed: int = 0
    threads: int = 1
    synth_per_arm: int = 16
    synth_dims: tuple[int, int, int] = (96, 96, 24)
    synth_regions: int = 48

    @property
    def reference_sequence(self) -> str:
        return self.reference or self.sequences[0]

    def validate(self) -> "RunConfig":
        def need(ok: bool, msg: str) -> None:
            if not ok:
                raise ConfigInvalid(msg)

        need(self.clusters >= 2 and self.clusters_fused >= 2, "clusters must be >= 2")
        need(self.folds >= 2, "folds must be >= 2")
        need(5 <= self.phenotypes <= 10, "phenotypes must be within 5..10")
        need(self.fusion in ("SF", "IF"), f"fusion must be SF or IF, got {self.fusion!r}")
        need(len(self.sequences) >= 1, "at least one sequence is required")
        need(len(set(self.sequences)) == len(self.sequences), "sequences contain duplicates")
        need(not self.reference or self.reference in self.sequences, "reference must be one of the sequences")
        need(self.patch_size >= 8 and self.patch_size % 8 == 0, "patch_size must be a positive multiple of 8")
        need(self.stride >= 1, "stride must be >= 1")
        need(self.n_patches >= 1, "n_patches must be >= 1")
        need(self.lam >= 0, "lam must be >= 0")
        need(self.pretrain_epochs >= 0 and self.epochs >= 0, "epochs must be >= 0")
        need(self.batch_size >= 1 and self.lr > 0 and 0 <= self.momentum < 1, "invalid optimiser settings")
        need(self.n_perm >= 100, "n_perm must be >= 100")
        need(self.n_trees >= 1, "n_trees must be >= 1")
        need(self.threads >= 1, "threads must be >= 1")
        need(self.synth_per_arm >= 1 and self.synth_regions >= 1, "synthetic cohort sizes must be positive")
        need(len(self.synth_dims) == 3 and min(self.synth_dims) >= 1 and min(self.synth_dims[:2]) >= self.patch_size,
             "synth_dims must be 3 positive sizes with in-plane sides >= patch_size")
        return self

    def hash(self) -> str:
        """Digest of every setting that can change results."""
        doc = {k: v for k, v in asdict(self).items() if k not in _UNHASHED}
        blob = json.dumps(doc, sort_keys=True, default=list).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]

    def as_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def path(self, key: str) -> Path:
        return Path(getattr(self, key))


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key: str, value: Any) -> Any:
    if key not in _FIELDS:
        raise ConfigInvalid(f"unknown config key {key!r}")
    default = getattr(RunConfig(), key)
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() not in ("true", "false", "1", "0", "yes", "no"):
                    raise ValueError(value)
                return value.lower() in ("true", "1", "yes")
            return bool(value)
        if isinstance(default, int):
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            if isinstance(value, str):
                value = [v.strip() for v in value.split(",") if v.strip()]
            items = list(value)
            if default and isinstance(default[0], int):
                items = [int(v) for v in items]
            else:
                items = [str(v) for v in items]
            return tuple(items)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalid(f"bad value for {key}: {value!r}") from exc


def parse_overrides(pairs: Iterable[str]) -> dict[str, Any]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigInvalid(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path: str | os.PathLike | None = None, overrides: dict[str, Any] | None = None) -> RunConfig:
    """Read a flat TOML file (or start from defaults) and apply ``overrides``."""
    values: dict[str, Any] = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                doc = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigInvalid(f"config file {path} does not exist") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigInvalid(f"config file {path}: {exc}") from exc
        for k, v in doc.items():
            if isinstance(v, dict):
                raise ConfigInvalid(f"config must be flat; section [{k}] is not allowed")
            values[k] = _coerce(k, v)
        base = path.parent
    for k, v in (overrides or {}).items():
        values[k] = _coerce(k, v)
    if "threads" not in values and os.environ.get(THREADS_ENV):
        values["threads"] = _coerce("threads", os.environ[THREADS_ENV])
    cfg = replace(RunConfig(), **values)
    for key in ("manifest", "out_dir"):
        p = Path(getattr(cfg, key))
        if not p.is_absolute():
            cfg = replace(cfg, **{key: str((base / p).resolve())})
    return cfg.validate()


def dump_config(cfg: RunConfig) -> str:
    """Flat TOML text that :func:`load_config` reads back to an equal config."""
    lines = []
    for k, v in cfg.as_dict().items():
        lines.append(f"{k} = {json.dumps(v)}")
    return "\n".join(lines) + "\n"

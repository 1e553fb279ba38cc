"""Run configuration: dotted keys, ``key = value`` files, and builders for module configs.

Resolution order is built-in defaults, then a config file, then explicit
overrides (command-line flags). Unknown keys are rejected by name.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from . import gmm, nn
from .dividemix import DivideConfig
from .errors import ConfigError, DataError
from .noise import BadLabelConfig
from .training import StandardConfig


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_ints(text: str) -> tuple[int, ...]:
    t = text.strip()
    return tuple(int(p) for p in t.split(",")) if t else ()


def _parse_schedule(text: str) -> tuple[tuple[int, float], ...] | None:
    """``"20:0.1,30:0.1"``; empty means no decay, ``auto`` defers to the owning config."""
    t = text.strip()
    if t == "auto":
        return None
    if not t:
        return ()
    out = []
    for part in t.split(","):
        epoch, mult = part.split(":")
        out.append((int(epoch), float(mult)))
    return tuple(out)


def _fmt(value: Any) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ",".join(f"{e}:{m!r}" for e, m in value)
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    default: Any
    help: str = ""


def _sgd_keys(prefix: str, sgd: nn.SgdConfig | None, schedule_auto: bool = False) -> dict[str, _Key]:
    sgd = sgd or nn.SgdConfig()
    return {
        f"{prefix}.lr": _Key(float, sgd.learning_rate),
        f"{prefix}.momentum": _Key(float, sgd.momentum),
        f"{prefix}.weight_decay": _Key(float, sgd.weight_decay),
        f"{prefix}.batch_size": _Key(int, sgd.batch_size),
        f"{prefix}.schedule": _Key(_parse_schedule, None if schedule_auto else tuple(sgd.schedule)),
    }


def _registry() -> dict[str, _Key]:
    std, rdm, bl, vb = StandardConfig(), DivideConfig(), BadLabelConfig(), gmm.VbConfig()
    keys: dict[str, _Key] = {
        "seed": _Key(int, 0, "master seed for models, shuffles and noise"),
        "model.hidden": _Key(_parse_ints, std.hidden, "hidden layer widths"),
        "standard.epochs": _Key(int, std.epochs),
        "standard.cp_weight": _Key(float, std.cp_weight),
        "badlabel.epochs": _Key(int, bl.epochs),
        "badlabel.alpha": _Key(float, bl.alpha),
        "badlabel.hidden": _Key(_parse_ints, bl.hidden),
        "idn.std": _Key(float, 0.1),
        "rdm.warmup_epochs": _Key(int, rdm.warmup_epochs),
        "rdm.cp_weight": _Key(float, rdm.cp_weight),
        "rdm.lambda": _Key(float, rdm.perturb_step),
        "rdm.tau_p": _Key(float, rdm.tau_p),
        "rdm.tau_c": _Key(float, rdm.tau_c),
        "rdm.epochs": _Key(int, rdm.epochs),
        "rdm.sharpen_temperature": _Key(float, rdm.sharpen_temperature),
        "rdm.n_augment": _Key(int, rdm.n_augment),
        "rdm.mixup_alpha": _Key(float, rdm.mixup_alpha),
        "rdm.lambda_u": _Key(float, rdm.lambda_u),
        "rdm.rampup_epochs": _Key(int, rdm.rampup_epochs),
        "rdm.jitter_std": _Key(float, rdm.jitter_std),
        "rdm.prior_weight": _Key(float, rdm.prior_weight),
        "rdm.co_guess": _Key(_parse_bool, rdm.co_guess),
        "rdm.refine_labels": _Key(_parse_bool, rdm.refine_labels),
        "rdm.fallback_fraction": _Key(float, rdm.fallback_fraction),
        "rdm.use_bayes_gmm": _Key(_parse_bool, rdm.use_bayes_gmm),
        "rdm.use_perturbation": _Key(_parse_bool, rdm.use_perturbation),
        "rdm.use_filtering": _Key(_parse_bool, rdm.use_filtering),
        "vb.tol": _Key(float, vb.tol),
        "vb.max_iter": _Key(int, vb.max_iter),
        "vb.weight_concentration": _Key(float, vb.weight_concentration),
        "vb.mean_precision": _Key(float, vb.mean_precision),
        "vb.precision_shape": _Key(float, vb.precision_shape),
        "vb.var_floor": _Key(float, vb.var_floor),
    }
    keys.update(_sgd_keys("standard", std.sgd))
    keys.update(_sgd_keys("rdm", rdm.sgd))
    keys.update(_sgd_keys("badlabel", bl.sgd, schedule_auto=True))
    return dict(sorted(keys.items()))


KEYS = _registry()


class RunConfig:
    """Typed mapping of every tunable knob, addressed by dotted key."""

    def __init__(self, values: dict[str, Any] | None = None):
        self._values = {k: spec.default for k, spec in KEYS.items()}
        for key, value in (values or {}).items():
            self[key] = value

    def __getitem__(self, key: str) -> Any:
        self._check(key)
        return self._values[key]

    def __setitem__(self, key: str, value: Any) -> None:
        self._check(key)
        if isinstance(value, str):
            try:
                value = KEYS[key].parse(value)
            except (ValueError, TypeError) as exc:
                raise ConfigError(f"bad value for {key}: {value!r} ({exc})") from None
        self._values[key] = value

    def __eq__(self, other) -> bool:
        return isinstance(other, RunConfig) and self._values == other._values

    @staticmethod
    def _check(key: str) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key: {key}")

    def update(self, values: dict[str, Any]) -> "RunConfig":
        for key, value in values.items():
            self[key] = value
        return self

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
            key, value = (p.strip() for p in line.split("=", 1))
            try:
                cfg[key] = value
            except ConfigError as exc:
                raise ConfigError(f"{source}:{lineno}: {exc}") from None
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read config file {path}: {exc.strerror}") from None
        return cls.from_text(text, str(path))

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self._values.items())

    def write(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8", newline="\n")

    # -- builders -----------------------------------------------------------

    def _sgd(self, prefix: str, fallback_schedule=()) -> nn.SgdConfig:
        schedule = self[f"{prefix}.schedule"]
        return nn.SgdConfig(
            learning_rate=self[f"{prefix}.lr"],
            momentum=self[f"{prefix}.momentum"],
            weight_decay=self[f"{prefix}.weight_decay"],
            schedule=fallback_schedule if schedule is None else schedule,
            batch_size=self[f"{prefix}.batch_size"],
        )

    def vb(self) -> gmm.VbConfig:
        return gmm.VbConfig(
            tol=self["vb.tol"], max_iter=self["vb.max_iter"],
            weight_concentration=self["vb.weight_concentration"],
            mean_precision=self["vb.mean_precision"],
            precision_shape=self["vb.precision_shape"],
            var_floor=self["vb.var_floor"], seed=self["seed"],
        )

    def standard(self) -> StandardConfig:
        return StandardConfig(
            hidden=self["model.hidden"], epochs=self["standard.epochs"],
            cp_weight=self["standard.cp_weight"], sgd=self._sgd("standard"), seed=self["seed"],
        )

    def badlabel(self) -> BadLabelConfig:
        T = self["badlabel.epochs"]
        auto = BadLabelConfig(epochs=T).sgd.schedule
        return BadLabelConfig(
            epochs=T, alpha=self["badlabel.alpha"], hidden=self["badlabel.hidden"],
            sgd=self._sgd("badlabel", auto), seed=self["seed"],
        )

    def divide(self) -> DivideConfig:
        return DivideConfig(
            hidden=self["model.hidden"],
            warmup_epochs=self["rdm.warmup_epochs"],
            cp_weight=self["rdm.cp_weight"],
            perturb_step=self["rdm.lambda"],
            tau_p=self["rdm.tau_p"],
            tau_c=self["rdm.tau_c"],
            epochs=self["rdm.epochs"],
            vb=self.vb(),
            sharpen_temperature=self["rdm.sharpen_temperature"],
            n_augment=self["rdm.n_augment"],
            mixup_alpha=self["rdm.mixup_alpha"],
            lambda_u=self["rdm.lambda_u"],
            rampup_epochs=self["rdm.rampup_epochs"],
            jitter_std=self["rdm.jitter_std"],
            prior_weight=self["rdm.prior_weight"],
            co_guess=self["rdm.co_guess"],
            refine_labels=self["rdm.refine_labels"],
            sgd=self._sgd("rdm"),
            fallback_fraction=self["rdm.fallback_fraction"],
            seed=self["seed"],
            use_bayes_gmm=self["rdm.use_bayes_gmm"],
            use_perturbation=self["rdm.use_perturbation"],
            use_filtering=self["rdm.use_filtering"],
        )


def describe_keys() -> str:
    return "\n".join(f"{k} (default {_fmt(s.default)})" for k, s in KEYS.items())


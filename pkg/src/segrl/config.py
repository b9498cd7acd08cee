"""Run configuration: the key registry, the config-file parser, and assembly.

Config files are plain text, one ``section.key = value`` pair per line.
Blank lines and lines starting with ``#`` are ignored; an inline ``#``
starts a comment. Every recognized key lives in the KEYS registry below,
which is the single source of truth: the parser validates against it (an
unknown key is a hard error naming the file line, catching typos early) and
the --help reference text is generated from it, so documentation cannot
drift from behavior.
"""

from __future__ import annotations

from dataclasses import dataclass

from .dataset import DatasetConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .losses import LossWeights
from .refine import ActionSpace
from .trainer import TrainConfig


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_int_list(text: str):
    if text.strip().lower() == "all":
        return None
    return tuple(int(tok) for tok in text.replace(",", " ").split())


def _parse_float_list(text: str):
    return tuple(float(tok) for tok in text.replace(",", " ").split())


@dataclass(frozen=True)
class KeySpec:
    name: str
    parse: callable
    default: object
    help: str
    choices: tuple | None = None

    def parse_value(self, text: str):
        try:
            value = self.parse(text.strip())
        except ValueError as exc:
            raise ConfigError(f"bad value for {self.name}: {exc}") from exc
        if self.choices is not None and value not in self.choices:
            raise ConfigError(
                f"bad value for {self.name}: {value!r} not in {self.choices}")
        return value

    def format_default(self) -> str:
        if self.default is None:
            return "all" if self.name == "encoder.tap_layers" else "none"
        if isinstance(self.default, tuple):
            return ",".join(str(v) for v in self.default)
        return str(self.default)


KEYS = (
    KeySpec("dataset.num_samples", int, 200, "number of synthetic samples to generate"),
    KeySpec("dataset.image_side", int, 64,
            "square image side in pixels (power of two)"),
    KeySpec("dataset.num_classes", int, 4, "segmentation classes incl. background"),
    KeySpec("dataset.seed", int, 0, "generator seed; each sample derives its own stream"),
    KeySpec("dataset.thin_structure_width", int, 1,
            "stroke width in pixels of the thread class"),
    KeySpec("encoder.patch_size", int, 8, "encoder patch size in pixels"),
    KeySpec("encoder.embed_dim", int, 64, "token embedding width D"),
    KeySpec("encoder.num_layers", int, 4, "frozen token-mixing blocks"),
    KeySpec("encoder.tap_layers", _parse_int_list, None,
            "comma list of tap layer indices, or 'all'"),
    KeySpec("encoder.weights_source", str, "seeded:0",
            "'seeded:<int>' surrogate or 'file:<path>' weight container"),
    KeySpec("model.decode_dim", int, 128, "channels after the fusion projection"),
    KeySpec("train.epochs", int, 30, "total training epochs T in the schedule"),
    KeySpec("train.batch_size", int, 8, "training batch size"),
    KeySpec("train.learning_rate", float, 1e-4, "Adam learning rate"),
    KeySpec("train.seed", int, 0, "run seed: init, shuffling, action sampling, split"),
    KeySpec("train.val_fraction", float, 0.2, "fraction of samples held out for validation"),
    KeySpec("train.ablation_mode", str, "curriculum_rl",
            "training objective variant",
            choices=("baseline", "curriculum", "curriculum_rl")),
    KeySpec("train.beta1", float, 0.9, "Adam first-moment decay"),
    KeySpec("train.beta2", float, 0.999, "Adam second-moment decay"),
    KeySpec("train.adam_eps", float, 1e-8, "Adam denominator epsilon"),
    KeySpec("train.grad_clip", float, 5.0, "global gradient-norm clip"),
    KeySpec("train.baseline_momentum", float, 0.9, "reward baseline EMA momentum"),
    KeySpec("loss.ce_weight", float, 1.0, "cross-entropy weight in L_seg"),
    KeySpec("loss.dice_weight", float, 1.0, "Dice-loss weight in L_seg"),
    KeySpec("loss.dice_smooth", float, 1.0, "Dice smoothing constant epsilon"),
    KeySpec("actions.alphas", _parse_float_list, (-0.1, 0.0, 0.1),
            "comma list of candidate residual scales; must include 0.0"),
    KeySpec("output.dir", str, "runs/run", "directory for all command outputs"),
)

_KEY_MAP = {k.name: k for k in KEYS}


def config_reference() -> str:
    """Generated key/default/description table covering every config key."""
    width = max(len(k.name) for k in KEYS)
    dwidth = max(len(k.format_default()) for k in KEYS)
    lines = ["config file keys (one 'key = value' per line, '#' comments):"]
    for k in KEYS:
        lines.append(f"  {k.name:<{width}}  [{k.format_default():>{dwidth}}]  {k.help}")
    return "\n".join(lines)


def parse_config_file(path) -> dict[str, object]:
    """Reads key=value lines; unknown keys and bad values name the file line."""
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {text!r}")
        key, _, raw = text.partition("=")
        key = key.strip()
        spec = _KEY_MAP.get(key)
        if spec is None:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        try:
            values[key] = spec.parse_value(raw)
        except ConfigError as exc:
            raise ConfigError(f"{path}:{lineno}: {exc}") from exc
    return values


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for one CLI invocation."""

    dataset: DatasetConfig
    train: TrainConfig
    out_dir: str

    @property
    def image_side(self) -> int:
        return self.dataset.height

    @property
    def num_classes(self) -> int:
        return self.dataset.num_classes


def build_run_config(values: dict[str, object] | None = None) -> RunConfig:
    """Defaults from the registry, overlaid with parsed file/CLI values."""
    merged = {k.name: k.default for k in KEYS}
    for key, value in (values or {}).items():
        if key not in merged:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = value
    v = merged
    dataset = DatasetConfig(
        num_samples=v["dataset.num_samples"],
        height=v["dataset.image_side"], width=v["dataset.image_side"],
        num_classes=v["dataset.num_classes"], seed=v["dataset.seed"],
        thin_structure_width=v["dataset.thin_structure_width"])
    encoder = EncoderConfig(
        patch_size=v["encoder.patch_size"], embed_dim=v["encoder.embed_dim"],
        num_layers=v["encoder.num_layers"], tap_layers=v["encoder.tap_layers"],
        weights_source=v["encoder.weights_source"])
    train = TrainConfig(
        epochs=v["train.epochs"], batch_size=v["train.batch_size"],
        learning_rate=v["train.learning_rate"], seed=v["train.seed"],
        val_fraction=v["train.val_fraction"], ablation_mode=v["train.ablation_mode"],
        loss_weights=LossWeights(ce=v["loss.ce_weight"], dice=v["loss.dice_weight"],
                                 dice_smooth=v["loss.dice_smooth"]),
        action_space=ActionSpace(alphas=v["actions.alphas"]),
        beta1=v["train.beta1"], beta2=v["train.beta2"], adam_eps=v["train.adam_eps"],
        grad_clip=v["train.grad_clip"],
        baseline_momentum=v["train.baseline_momentum"],
        decode_dim=v["model.decode_dim"], encoder=encoder)
    return RunConfig(dataset=dataset, train=train, out_dir=str(v["output.dir"]))

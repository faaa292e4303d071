"""Text configuration: sections of key = value lines with typed defaults.

The format is deliberately tiny — six fixed sections, every key known in
advance with a documented default, unknown anything rejected with the line
number.  A parsed config can be echoed back to canonical text; checkpoints
store that echo so a model can be rebuilt from the checkpoint alone.
"""

import numpy as np

from .backbone import BackboneConfig, ConfigError
from .heads import DPT3DConfig
from .losses import LossWeights


def _int(s):
    return int(s)


def _float(s):
    return float(s)


def _ints(s):
    return tuple(int(p) for p in s.split(","))


def _floats(s):
    return tuple(float(p) for p in s.split(","))


# section -> key -> (parse, default).  The echo renders in this exact order.
SCHEMA = {
    "data": {
        "frames": (_int, 21),
        "height": (_int, 48),
        "width": (_int, 80),
    },
    "model": {
        "blocks": (_int, 10),
        "pcb": (_int, 4),
        "width": (_int, 128),
        "heads": (_int, 4),
        "mlp_ratio": (_int, 4),
        "cam_blocks": (_int, 6),
        "cond_dim": (_int, 64),
        "cam_feat": (_int, 32),
        "geo_width": (_int, 128),
        "registers": (_int, 4),
        "bridge_blocks": (_int, 2),
        "timesteps": (_int, 1000),
        "sample_steps": (_int, 50),
        "taps": (_ints, (2, 3, 4, 6)),
        "factors": (_floats, (0.5, 1.0, 2.0, 4.0)),
        "fusion_width": (_int, 32),
        "seed": (_int, 0),
    },
    "stage0": {
        "steps": (_int, 2000),
        "batch": (_int, 4),
        "lr": (_float, 1e-3),
        "weight_decay": (_float, 0.0),
    },
    "stage1": {
        "steps": (_int, 1000),
        "batch": (_int, 4),
        "lr": (_float, 1e-3),
        "weight_decay": (_float, 0.0),
        "tgm_weight": (_float, 1.0),
        "frame_weight": (_float, 1.0),
        "depth_weight": (_float, 1.0),
        "pmap_weight": (_float, 1.0),
        "cam_weight": (_float, 3.0),
        "conf_weight": (_float, 0.1),
        "huber_delta": (_float, 1.0),
    },
    "stage2": {
        "steps": (_int, 500),
        "batch": (_int, 2),
        "lr": (_float, 3e-3),
        "weight_decay": (_float, 0.0),
        "lam": (_float, 1.0),
    },
    "eval": {
        "seed": (_int, 0),
    },
}


def defaults():
    return {sec: {k: v for k, (_, v) in keys.items()}
            for sec, keys in SCHEMA.items()}


def parse_config(text):
    """key = value lines under [section] headers; '#' starts a comment.
    Missing keys take their defaults; anything unknown is an error that
    names the offending line."""
    conf = defaults()
    section = None
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError("line %d: unknown section [%s]"
                                  % (ln, section))
            continue
        if "=" not in line:
            raise ConfigError("line %d: expected key = value, got %r"
                              % (ln, raw.strip()))
        if section is None:
            raise ConfigError("line %d: key before any [section]" % ln)
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA[section]:
            raise ConfigError("line %d: unknown key %r in [%s]"
                              % (ln, key, section))
        parse = SCHEMA[section][key][0]
        try:
            conf[section][key] = parse(val)
        except ValueError:
            raise ConfigError("line %d: bad value %r for %s.%s"
                              % (ln, val, section, key))
    _validate(conf)
    return conf


def _validate(conf):
    for sec in ("stage0", "stage1", "stage2"):
        if conf[sec]["steps"] < 0:
            raise ConfigError("%s.steps must be >= 0" % sec)
        if conf[sec]["batch"] < 1:
            raise ConfigError("%s.batch must be >= 1" % sec)
        if conf[sec]["lr"] <= 0:
            raise ConfigError("%s.lr must be positive" % sec)
        if conf[sec]["weight_decay"] < 0:
            raise ConfigError("%s.weight_decay must be >= 0" % sec)
    for key in ("frames", "height", "width"):
        if conf["data"][key] < 1:
            raise ConfigError("data.%s must be >= 1" % key)


def _render(val):
    if isinstance(val, tuple):
        return ",".join(_render(v) for v in val)
    if isinstance(val, float):
        return repr(val)
    return str(val)


def config_text(conf):
    """Canonical echo: fixed section and key order, values that re-parse to
    the same config bit for bit."""
    lines = []
    for sec, keys in SCHEMA.items():
        lines.append("[%s]" % sec)
        for key in keys:
            lines.append("%s = %s" % (key, _render(conf[sec][key])))
        lines.append("")
    return "\n".join(lines)


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def model_config(conf):
    """The two architecture configs implied by [model]; tap indices are
    checked against the block budget here so a bad pairing fails before any
    parameters exist."""
    m = conf["model"]
    cfg = BackboneConfig(
        blocks=m["blocks"], pcb=m["pcb"], width=m["width"], heads=m["heads"],
        mlp_ratio=m["mlp_ratio"], cam_blocks=m["cam_blocks"],
        cond_dim=m["cond_dim"], cam_feat=m["cam_feat"],
        geo_width=m["geo_width"], registers=m["registers"],
        bridge_blocks=m["bridge_blocks"], timesteps=m["timesteps"],
        sample_steps=m["sample_steps"])
    dcfg = DPT3DConfig(taps=m["taps"], factors=m["factors"],
                       fusion_width=m["fusion_width"])
    for tap in dcfg.taps:
        if not 1 <= tap <= cfg.n_irg:
            raise ConfigError("tap %d outside 1..%d" % (tap, cfg.n_irg))
    return cfg, dcfg


def loss_weights(conf):
    s1, s2 = conf["stage1"], conf["stage2"]
    return LossWeights(
        tgm=s1["tgm_weight"], frame=s1["frame_weight"],
        stage1=(s1["depth_weight"], s1["pmap_weight"], s1["cam_weight"]),
        lam=s2["lam"], conf=s1["conf_weight"], delta=s1["huber_delta"])


def stage_hparams(conf, stage):
    """Optimizer and loop settings for 'stage0'|'stage1'|'stage2'."""
    if stage not in ("stage0", "stage1", "stage2"):
        raise ConfigError("unknown stage %r" % stage)
    sec = conf[stage]
    hp = {"steps": sec["steps"], "batch": sec["batch"], "lr": sec["lr"],
          "weight_decay": sec["weight_decay"],
          "beta1": 0.9, "beta2": 0.999, "eps": 1e-8}
    return hp

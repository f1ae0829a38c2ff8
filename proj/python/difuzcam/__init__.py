"""Python bindings for the difuzcam C++ library."""

import json as _json

from ._difuzcam import (
    MSequence,
    SeparableSystem,
    build_separable_factors,
    default_taps,
    forward_project,
    generate_mseq,
    generate_scene,
    psnr,
    simulate_capture,
    ssim,
    tikhonov_reconstruct,
    tikhonov_rgb,
)
from . import _difuzcam


def _text(config):
    return config if isinstance(config, str) else _json.dumps(config)


def make_system(spec=None):
    """Camera from a dict with the keys of the config 'system' section."""
    return _difuzcam.make_system(_text(spec or {}))


def config_hash(config, base_dir=""):
    return _difuzcam.config_hash(_text(config), str(base_dir))


def make_dataset(config, base_dir="", threads=0):
    return _difuzcam.make_dataset(_text(config), str(base_dir), threads)


def train(config, base_dir="", only=(), step_budget=-1, verbose=False):
    return _difuzcam.train(_text(config), str(base_dir), list(only), step_budget, verbose)


def evaluate(config, base_dir="", modes=(), verbose=False):
    return _difuzcam.evaluate(_text(config), str(base_dir), list(modes), verbose)


def report(config, base_dir=""):
    return _difuzcam.report(_text(config), str(base_dir))

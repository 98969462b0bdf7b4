"""Toy lane segmenter. Training lives in :mod:`cdolane.toytrainer.training`;
this package namespace only exposes the inference path."""

from .model import ToyModel, decode_lanes, forward, infer

__all__ = ["ToyModel", "decode_lanes", "forward", "infer"]

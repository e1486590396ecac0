"""Reading comprehension with supervised self-attention."""

import json as _json

from . import _core

__all__ = [
    "synth",
    "instance_error",
    "build_supervision",
    "supervision_loss",
    "answer_loss",
    "pointer_sum_decode",
    "noam_lr",
    "train",
    "evaluate",
    "read_corpus",
    "write_corpus",
]


def _line(instance):
    return instance if isinstance(instance, str) else _json.dumps(instance, ensure_ascii=False)


def synth(count, seed, pronoun_rate=None):
    """Generates annotated synthetic instances as dicts."""
    lines = _core.synth(count, seed) if pronoun_rate is None else _core.synth(count, seed, pronoun_rate)
    return [_json.loads(line) for line in lines]


def instance_error(instance):
    """Empty string for a valid instance, otherwise the first problem found."""
    return _core.instance_error(_line(instance))


def build_supervision(kind, instance):
    """Target columns per row for one of depparse, corefall, corefprev, corefnext, narrative."""
    return _core.build_supervision(kind, _line(instance))


def supervision_loss(attention, rows, weight_by_targets=True):
    return _core.supervision_loss([list(map(float, r)) for r in attention], rows, weight_by_targets)


def answer_loss(probs, positions):
    return _core.answer_loss([float(p) for p in probs], list(positions))


def pointer_sum_decode(probs, tokens, lowercase=False):
    """Returns (word, summed probability, [(type, probability), ...])."""
    return _core.pointer_sum_decode([float(p) for p in probs], list(tokens), lowercase)


def noam_lr(d_model, warmup, step):
    return _core.noam_lr(d_model, warmup, step)


def train(config, train, dev, seeds, out):
    """Trains one run per seed under `out`; returns the seed summary."""
    text = config if isinstance(config, str) else _json.dumps(config)
    return _json.loads(_core.train(text, [_line(x) for x in train], [_line(x) for x in dev], list(seeds), str(out)))


def evaluate(run, data, seed, raw=False):
    """Accuracy and predictions of the seed's checkpoint on `data`."""
    return _json.loads(_core.evaluate(str(run), [_line(x) for x in data], seed, raw))


def read_corpus(path):
    with open(path, encoding="utf-8") as f:
        return [_json.loads(line) for line in f if line.strip()]


def write_corpus(path, instances):
    with open(path, "w", encoding="utf-8") as f:
        for x in instances:
            f.write(_line(x) + "\n")

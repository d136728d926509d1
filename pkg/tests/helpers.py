from epsam.config import from_dict

TINY = {
    "preset": "desk",
    "seed": 0,
    "syndata": {"train": 8, "valid": 4, "test": 4, "slides": 6, "generator": {"size": 32}},
    "cam": {"hyper": {"epochs": 1, "batch_size": 4}},
    "pepm": {"k": 8, "strategy": "gt"},
    "segmenter": {"embed_dim": 16, "decoder_width": 16, "hyper": {"epochs": 2, "batch_size": 4}},
    "selftrain": {"iterations": 1},
}


def tiny_config(**overrides):
    data = dict(TINY)
    data.update(overrides)
    return from_dict(data)

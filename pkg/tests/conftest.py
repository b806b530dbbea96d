import numpy as np
import pytest

from mgfusion.dataio import Batch, SynthConfig, generate_synthetic, load_dataset, pad_stacks
from mgfusion.models import ModelSpec, build_model

TINY = dict(dim=8, text_layers=3, speech_layers=2, hidden1=6, hidden2=5, heads=2, ff_mult=2,
            dropout=0.2, n_classes=4)

# One representative spec per architecture tag.
ARCH_SPECS = {
    "linear": dict(arch="linear", granularities=("F",), text=False),
    "transformer": dict(arch="transformer", granularities=(), text=True),
    "late_fusion": dict(arch="late_fusion", granularities=("P", "S", "F")),
    "coattention": dict(arch="coattention", granularities=("P", "F")),
    "concat": dict(arch="concat", granularities=("F",)),
}


def tiny_spec(tag, **kw):
    return ModelSpec(**{**TINY, **ARCH_SPECS[tag], **kw})


def random_streams(rng, spec, K_max=4):
    streams = {}
    for key in spec.inputs:
        K = int(rng.integers(1, K_max + 1))
        streams[key] = rng.normal(size=(spec.layers_for(key), K, spec.dim))
    return streams


def make_batch(stream_list, labels=None) -> Batch:
    keys = stream_list[0].keys()
    inputs = {k: pad_stacks([s[k] for s in stream_list]) for k in keys}
    B = len(stream_list)
    labels = np.arange(B) % 4 if labels is None else np.asarray(labels)
    return Batch(inputs, labels, [f"u{i}" for i in range(B)])


def tiny_batch(spec, B=3, seed=0, K_max=4):
    rng = np.random.default_rng(seed)
    return make_batch([random_streams(rng, spec, K_max) for _ in range(B)])


def tiny_model(tag, dtype=np.float64, seed=0, **kw):
    model = build_model(tiny_spec(tag, seed=seed, **kw))
    rng = np.random.default_rng(seed + 100)
    # Move mixer weights and LN params off their symmetric init so every
    # gradient path is exercised.
    for name, p in model.named_parameters():
        if name.endswith(("weights", "gain")):
            p.data = p.data + rng.uniform(-0.3, 0.3, size=p.shape)
        elif name.endswith(("bias", ".b")):
            p.data = p.data + rng.normal(scale=0.1, size=p.shape)
    return model.astype(dtype)


@pytest.fixture(scope="session")
def synth_small(tmp_path_factory):
    """A small complementary-scheme corpus shared across tests."""
    root = tmp_path_factory.mktemp("synth_small")
    manifest = generate_synthetic(SynthConfig(n=60, layers=2, dim=8, seed=3), root)
    return manifest


@pytest.fixture(scope="session")
def synth_small_utts(synth_small):
    return load_dataset(synth_small)

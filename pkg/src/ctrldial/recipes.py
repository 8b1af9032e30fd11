"""Ready-made toy setups shared by the command line, the demos and the tests."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .continual import CLConfig, Curriculum
from .model import DecoderLM, ModelConfig, TrainConfig, fit
from .steering import AttributeModel, BagOfWordsClassifier, train_attribute_model
from .synth import StyleSpec, gen_attribute_corpus, gen_curriculum_domains
from .vocab import EOS_ID, Vocab


@dataclass
class StyleBench:
    """Separable style task: a base LM corpus plus two disjoint labelled corpora."""

    spec: StyleSpec
    vocab: Vocab
    lm_data: list  # (prefix ids, response ids + EOS)
    attr_corpus: list  # (prefix ids, response ids, label), for the internal attribute model
    external_corpus: list  # same shape, only for the external classifier
    prefixes: list


def build_style_bench(styles=("positive", "negative"), n_lm: int = 600, n_attr: int = 300,
                      n_external: int = 300, n_prefixes: int = 200, seed: int = 0, **spec_kwargs) -> StyleBench:
    spec = StyleSpec(list(styles), **spec_kwargs)
    vocab = Vocab(spec.vocabulary())

    def enc(items):
        return [(vocab.encode(s.prefix, bos=True), vocab.encode(s.response), s.label) for s in items]

    lm = enc(gen_attribute_corpus(spec, n_lm, seed + 1))
    attr = enc(gen_attribute_corpus(spec, n_attr, seed + 2))
    ext = enc(gen_attribute_corpus(spec, n_external, seed + 3))
    prefixes = [p for p, _, _ in enc(gen_attribute_corpus(spec, n_prefixes, seed + 4))]
    return StyleBench(spec, vocab, [(p, r + [EOS_ID]) for p, r, _ in lm], attr, ext, prefixes)


def style_model_config(vocab_size: int) -> ModelConfig:
    return ModelConfig(vocab_size=vocab_size, d_model=32, n_layers=2, n_heads=2, ffn_dim=64, max_len=24)


STYLE_TRAIN = TrainConfig(lr=3e-3, batch_size=32, epochs=15, warmup_steps=20)
STYLE_ADAPTER_TRAIN = TrainConfig(lr=3e-3, batch_size=32, epochs=10, warmup_steps=10)


def train_style_stack(bench: StyleBench, seed: int = 0, model_cfg: ModelConfig | None = None,
                      train_cfg: TrainConfig | None = None) -> tuple[DecoderLM, AttributeModel, BagOfWordsClassifier]:
    """Base LM, internal attribute model and external bag-of-words scorer."""
    model = DecoderLM(model_cfg or style_model_config(len(bench.vocab)), seed=seed)
    fit(model, bench.lm_data, replace(train_cfg or STYLE_TRAIN, seed=seed))
    attr = train_attribute_model(model, bench.attr_corpus, bench.spec.styles, seed=seed)
    ext = BagOfWordsClassifier(len(bench.vocab), len(bench.spec.styles))
    ext.fit([r for _, r, _ in bench.external_corpus], [y for *_, y in bench.external_corpus], seed=seed)
    return model, attr, ext


def style_rate(scorer: BagOfWordsClassifier, responses, target: int) -> float:
    """Share of non-empty responses the external scorer assigns to ``target`` (empty ones count as misses)."""
    if not responses:
        return 0.0
    live = [i for i, r in enumerate(responses) if len(r)]
    if not live:
        return 0.0
    hits = np.sum(scorer.predict([responses[i] for i in live]) == target)
    return float(hits) / len(responses)


def build_cl_suite(n_domains: int = 5, n_dialogues: int = 100, seed: int = 0, setting: str = "INTENT") -> Curriculum:
    """Disjoint-vocabulary synthetic domains, one task per domain."""
    return Curriculum.from_datasets(gen_curriculum_domains(n_domains, n_dialogues, seed, setting), seed=seed)


def cl_config(vocab_size: int, **overrides) -> CLConfig:
    """Toy-scale defaults under which every strategy learns each domain on its own."""
    model = ModelConfig(vocab_size=vocab_size, d_model=64, n_layers=2, n_heads=2, ffn_dim=128, max_len=32)
    train = TrainConfig(lr=3e-3, batch_size=32, epochs=20, warmup_steps=10, loss_mode="all")
    adapter = replace(train, epochs=60)
    cfg = CLConfig(model, train, adapter_bottleneck=100, adapter_train=adapter, max_new=4)
    return replace(cfg, **overrides)

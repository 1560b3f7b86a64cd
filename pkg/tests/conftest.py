import numpy as np
import pytest
import torch

from kgessay.corpus import RESERVED, TrainingExample, Vocabulary
from kgessay.generator import Generator, ModelDims, make_batch, topic_view
from kgessay.knowledge_graph import Triple, TripleStore

# Lines collected by the acceptance module, echoed in the terminal summary.
ACCEPTANCE_LINES = []

TINY_WORDS = ["law", "court", "judge", "happy", "sad", "the", "rule", "school"]


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class Tiny:
    """A 12-word vocabulary, a 3-edge graph around "law" and a float64 model."""

    def __init__(self, seed=0, **dims):
        self.vocab = Vocabulary(list(RESERVED) + TINY_WORDS)
        self.store = TripleStore.from_triples([
            Triple("law", "part_of", "court"),
            Triple("judge", "related_to", "law"),
            Triple("law", "antonym", "rule"),
        ])
        base = dict(d_word=4, d_senti=4, enc_hidden=3, d_z=3, dec_hidden=5, dropout=0.0)
        base.update(dims)
        self.dims = ModelDims(**base)
        torch.manual_seed(seed)
        self.model = Generator(len(self.vocab), self.store.num_relations, self.dims).double()
        # larger weights than the default init make gradients less degenerate
        with torch.no_grad():
            for p in self.model.parameters():
                p.uniform_(-0.5, 0.5)
        self.examples = [
            TrainingExample(["law"], [], ["the", "court", "happy"], "positive"),
            TrainingExample(["law"], [["the", "court", "happy"]], ["judge", "sad"], "negative"),
        ]

    def view(self, topics):
        return topic_view(self.store, topics, self.vocab, self.dims.max_per_topic)

    def batch(self, examples=None):
        examples = examples or self.examples
        return make_batch(examples, self.vocab, [self.view(e.topics) for e in examples])

    def params(self):
        return {k: v.detach().numpy().astype(np.float64) for k, v in self.model.state_dict().items()}


@pytest.fixture
def tiny():
    return Tiny()

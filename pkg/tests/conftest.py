"""Shared fixtures: small synthetic corpora reused across test modules."""

import pytest

from sonarssl.patches import PatchTensor, SplitSpec, write_corpus
from sonarssl.synthetic import generate_labeled_patches


def build_synthetic_corpus(out_dir, n_per_class, seed=0,
                           fractions=(0.8, 0.1, 0.1), subset="synthetic",
                           n_total=None):
    """Render labeled synthetic patches and write a corpus directory.

    ``n_total`` trims the corpus to an exact patch count when the target
    size is not a multiple of the class count.
    """
    patches, labels = generate_labeled_patches(n_per_class, seed=seed)
    records = [
        PatchTensor(pixels=patches[i], source_id=f"scene{seed}_{i}",
                    offset=(0, 0), subset=subset, label=labels[i])
        for i in range(len(labels))
    ]
    if n_total is not None:
        records = records[:n_total]
    return write_corpus(out_dir, records, SplitSpec(fractions=fractions, seed=seed))


@pytest.fixture(scope="session")
def small_corpus_dir(tmp_path_factory):
    """~240 labeled synthetic patches, splits 80/10/10."""
    d = tmp_path_factory.mktemp("corpus_small")
    build_synthetic_corpus(d, n_per_class=80, seed=11)
    return d


@pytest.fixture(scope="session")
def mixed_corpus_dir(tmp_path_factory):
    """Two subsets named real and synthetic, for data-mode filtering."""
    d = tmp_path_factory.mktemp("corpus_mixed")
    patches, labels = generate_labeled_patches(30, seed=5)
    records = [
        PatchTensor(pixels=patches[i], source_id=f"mix{i}", offset=(0, 0),
                    subset="real" if i % 2 == 0 else "synthetic",
                    label=labels[i])
        for i in range(len(labels))
    ]
    write_corpus(d, records, SplitSpec(seed=5))
    return d

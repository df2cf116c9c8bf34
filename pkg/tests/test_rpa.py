import numpy as np
import pytest

from tractpipe.metrics import dice_all
from tractpipe.phantom import PhantomConfig, generate_atlas, generate_cohort
from tractpipe.registration import RegistrationConfig, warp, warp_labels
from tractpipe.rpa import LabeledSubject, build_pseudo_dataset, synthesize_pseudo_pair
from tractpipe.volume import ShapeMismatchError

CFG = PhantomConfig(dims=(16, 16, 16), cohort_size=6, n_test=1, tube_radius=2.0, deform_amplitude=1.5, noise_sigma=0.0)
REG = RegistrationConfig(gamma=1e6, step_size=0.01, max_iters=60)


@pytest.fixture(scope="module")
def cohort():
    return generate_cohort(generate_atlas(CFG), CFG)


def test_count_contract(cohort):
    pseudo = build_pseudo_dataset(cohort.labeled, cohort.unlabeled, RegistrationConfig(max_iters=2), ids=cohort.unlabeled_ids)
    assert len(pseudo) == len(cohort.unlabeled) == 4
    assert [p.source_unlabeled_id for p in pseudo] == cohort.unlabeled_ids


def test_zero_iterations_copies_labeled(cohort):
    p = synthesize_pseudo_pair(cohort.labeled, cohort.unlabeled[0], RegistrationConfig(max_iters=0))
    np.testing.assert_array_equal(p.peaks, cohort.labeled.peaks)
    np.testing.assert_array_equal(p.labels, cohort.labeled.labels)
    assert np.all(p.field == 0)


def test_pseudo_pair_is_consistent(cohort):
    p = synthesize_pseudo_pair(cohort.labeled, cohort.unlabeled[0], REG, "u0")
    np.testing.assert_array_equal(p.peaks, warp(cohort.labeled.peaks, p.field))
    np.testing.assert_array_equal(p.labels, warp_labels(cohort.labeled.labels, p.field))
    assert p.labels.dtype == np.uint8
    assert p.trace[-1] <= p.trace[0]
    assert p.source_unlabeled_id == "u0"


def test_registration_moves_labels_toward_hidden_truth(cohort):
    pseudo = build_pseudo_dataset(cohort.labeled, cohort.unlabeled, REG, ids=cohort.unlabeled_ids)
    before = np.mean([dice_all(cohort.labeled.labels, cohort.hidden_truth[s]).mean() for s in cohort.unlabeled_ids])
    after = np.mean([dice_all(p.labels, cohort.hidden_truth[p.source_unlabeled_id]).mean() for p in pseudo])
    assert after > before


def test_parallel_matches_serial(cohort):
    cfg = RegistrationConfig(gamma=1e6, step_size=0.01, max_iters=5)
    a = build_pseudo_dataset(cohort.labeled, cohort.unlabeled, cfg, jobs=1)
    b = build_pseudo_dataset(cohort.labeled, cohort.unlabeled, cfg, jobs=2)
    for x, y in zip(a, b):
        assert x.field.tobytes() == y.field.tobytes()
        assert x.labels.tobytes() == y.labels.tobytes()


def test_errors(cohort):
    with pytest.raises(ValueError):
        build_pseudo_dataset(cohort.labeled, [], REG)
    with pytest.raises(ValueError):
        build_pseudo_dataset(cohort.labeled, cohort.unlabeled, REG, ids=["a"])
    with pytest.raises(ShapeMismatchError):
        synthesize_pseudo_pair(cohort.labeled, np.zeros((8, 8, 8, 3)), REG)
    with pytest.raises(ValueError):
        LabeledSubject(np.zeros((4, 4, 4, 3)), np.full((4, 4, 4, 2), 2, dtype=np.uint8))
    with pytest.raises(ShapeMismatchError):
        LabeledSubject(np.zeros((4, 4, 4, 3)), np.zeros((4, 4, 5, 2), dtype=np.uint8))

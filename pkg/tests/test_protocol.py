import numpy as np
import pytest

from dualcp import errors, protocol
from dualcp.calibrator import (
    CalibratorArch,
    CalibratorParams,
    Mlp,
    TrainConfig,
    forward,
    init_params,
    params_to_vector,
    train_domain,
)
from dualcp.protocol import (
    AccuracyMatrix,
    DomainMemory,
    average_accuracy,
    domain_id_accuracy,
    forgetting,
    identify_domain,
    predict,
    predict_batch,
    run_protocol,
)
from dualcp.prototypes import build_dual_bank
from dualcp.store import GuidanceMatrix, restrict_to_domain
from dualcp.synth import SynthSpec, generate


def random_bank(rng, d, k, p=0.7):
    cols = rng.standard_normal((d, k))
    cols /= np.linalg.norm(cols, axis=0)
    return build_dual_bank(GuidanceMatrix(cols, tuple(f"c{i}" for i in range(k))), p)


def memory_with(rng, bank, d, t):
    params = [init_params(bank.num_groups, d, CalibratorArch(), rng) for _ in range(t)]
    centroids = [rng.standard_normal(d) for _ in range(t)]
    return DomainMemory(centroids=centroids, params=params)


# --- domain identification ---

def test_identify_domain_self_match():
    rng = np.random.Generator(np.random.PCG64(0))
    centroids = [np.eye(6)[i] * (i + 1.0) for i in range(3)]
    bank = random_bank(rng, 6, 3)
    memory = DomainMemory(
        centroids=centroids,
        params=[init_params(bank.num_groups, 6, CalibratorArch(), rng)] * 3,
    )
    assert identify_domain(centroids[2], memory) == 2


def test_identify_domain_tie_breaks_low_index():
    rng = np.random.Generator(np.random.PCG64(1))
    c = np.array([1.0, 0.0, 0.0])
    memory = DomainMemory(
        centroids=[c, 2.0 * c, np.array([0.0, 1.0, 0.0])],
        params=[None, None, None],
    )
    # equal cosine to centroids 0 and 1
    assert identify_domain(np.array([3.0, 0.0, 0.0]), memory) == 0


def test_identify_domain_zero_vector():
    memory = DomainMemory(centroids=[np.ones(3)], params=[None])
    with pytest.raises(errors.ZeroVector):
        identify_domain(np.zeros(3), memory)


def test_identify_domain_scale_invariant():
    rng = np.random.Generator(np.random.PCG64(2))
    memory = DomainMemory(
        centroids=[rng.standard_normal(8) for _ in range(4)], params=[None] * 4
    )
    for _ in range(50):
        z = rng.standard_normal(8)
        assert identify_domain(z, memory) == identify_domain(7.3 * z, memory)


def test_identify_domain_matches_exhaustive_scan():
    rng = np.random.Generator(np.random.PCG64(3))
    centroids = [rng.standard_normal(10) for _ in range(5)]
    memory = DomainMemory(centroids=centroids, params=[None] * 5)
    queries = rng.standard_normal((1000, 10))
    got = protocol.identify_domain_batch(queries, memory)
    for row, choice in zip(queries, got):
        best, best_score = 0, -np.inf
        for idx, c in enumerate(centroids):
            score = float(row @ c) / (np.linalg.norm(row) * np.linalg.norm(c))
            if score > best_score:
                best, best_score = idx, score
        assert best == int(choice)


# --- prediction ---

def aligned_params(bank, x, group, member):
    """Rank-one layers that map x exactly onto the chosen prototypes."""
    d = bank.dim
    e_c = bank.coarse[:, group]
    e_f = bank.fine[group][:, member]
    coarse = Mlp([np.outer(e_c, x)], [np.zeros(d)])
    fine = []
    for g in range(bank.num_groups):
        fine.append(Mlp([np.outer(e_f, np.concatenate([x, e_c]))], [np.zeros(d)]))
    return CalibratorParams(
        coarse=coarse, fine=fine, arch=CalibratorArch(num_layers=1), dim=d
    )


def test_predict_perfect_alignment():
    rng = np.random.Generator(np.random.PCG64(4))
    bank = random_bank(rng, 8, 5, p=0.6)
    group = next(
        g for g, members in enumerate(bank.grouping.groups) if len(members) >= 2
    ) if any(len(g) >= 2 for g in bank.grouping.groups) else 0
    member = len(bank.grouping.groups[group]) - 1
    x = rng.standard_normal(8)
    params = aligned_params(bank, x, group, member)
    memory = DomainMemory(centroids=[x.copy()], params=[params])
    assert predict(x, memory, bank) == bank.grouping.groups[group][member]


def test_predict_singleton_group_bypasses_fine_stage():
    gm = GuidanceMatrix(np.eye(6), tuple("abcdef"))
    bank = build_dual_bank(gm, 0.85)  # orthogonal: all singletons
    rng = np.random.Generator(np.random.PCG64(5))
    x = rng.standard_normal(6)
    params = aligned_params(bank, x, group=3, member=0)
    # poison every fine layer: predictions must not consult them
    for mlp in params.fine:
        mlp.weights[0] = np.full_like(mlp.weights[0], np.nan)
    memory = DomainMemory(centroids=[x.copy()], params=[params])
    assert predict(x, memory, bank) == bank.grouping.groups[3][0]


def exhaustive_two_stage(z, memory, bank):
    """Flat oracle: score every (group, member) pair with the same rule."""
    best_dom, best_score = 0, -np.inf
    for idx, c in enumerate(memory.centroids):
        score = float(z @ c) / (np.linalg.norm(z) * np.linalg.norm(c))
        if score > best_score:
            best_dom, best_score = idx, score
    params = memory.params[best_dom]
    table = {}
    for g, members in enumerate(bank.grouping.groups):
        for j, cls in enumerate(members):
            x_c, x_f = forward(params, z, g)
            coarse_score = float(x_c @ bank.coarse[:, g]) / np.linalg.norm(
                bank.coarse[:, g]
            )
            fine_score = float(x_f @ bank.fine[g][:, j]) / np.linalg.norm(
                bank.fine[g][:, j]
            )
            table[(g, j)] = (coarse_score, fine_score, cls)
    best_g = max(range(bank.num_groups), key=lambda g: table[(g, 0)][0])
    members = bank.grouping.groups[best_g]
    best_j = max(range(len(members)), key=lambda j: table[(best_g, j)][1])
    return table[(best_g, best_j)][2]


def test_predict_matches_exhaustive_oracle():
    rng = np.random.Generator(np.random.PCG64(6))
    d, k, t = 8, 6, 3
    bank = random_bank(rng, d, k, p=0.6)
    memory = memory_with(rng, bank, d, t)
    queries = rng.standard_normal((500, d))
    got, _ = predict_batch(queries, memory, bank)
    for z, label in zip(queries, got):
        assert exhaustive_two_stage(z, memory, bank) == int(label)


def test_predict_batch_thread_fanout_identical(monkeypatch):
    rng = np.random.Generator(np.random.PCG64(7))
    d, k = 8, 6
    bank = random_bank(rng, d, k, p=0.6)
    memory = memory_with(rng, bank, d, 2)
    queries = rng.standard_normal((64, d))
    seq, seq_dom = predict_batch(queries, memory, bank, num_threads=1)
    monkeypatch.setenv("DUALCP_THREADS", "4")
    par, par_dom = predict_batch(queries, memory, bank)
    assert np.array_equal(seq, par)
    assert np.array_equal(seq_dom, par_dom)


# --- metrics ---

def test_average_accuracy_hand_case():
    m = AccuracyMatrix(np.array([[0.8, 0.7], [np.nan, 0.9]]))
    assert abs(average_accuracy(m) - 0.8) < 1e-12


def test_average_accuracy_perfect():
    m = AccuracyMatrix(np.array([[1.0, 1.0], [np.nan, 1.0]]))
    assert average_accuracy(m) == 1.0


def test_average_accuracy_single_domain():
    m = AccuracyMatrix(np.array([[0.75]]))
    assert average_accuracy(m) == 0.75


def test_forgetting_hand_case():
    m = AccuracyMatrix(np.array([[0.8, 0.7], [np.nan, 0.9]]))
    assert abs(forgetting(m) - (-0.1)) < 1e-12


def test_forgetting_no_change_is_zero():
    m = AccuracyMatrix(np.array([[0.6, 0.6, 0.6], [np.nan, 0.7, 0.7], [np.nan, np.nan, 0.5]]))
    assert forgetting(m) == 0.0


def test_forgetting_positive_on_improvement():
    m = AccuracyMatrix(np.array([[0.6, 0.8], [np.nan, 0.9]]))
    assert forgetting(m) > 0.0


def test_forgetting_undefined_single_domain():
    with pytest.raises(errors.Undefined):
        forgetting(AccuracyMatrix(np.array([[1.0]])))


def test_accuracy_matrix_validation():
    with pytest.raises(errors.BadConfig):
        AccuracyMatrix(np.array([[1.2]]))
    with pytest.raises(errors.BadConfig):
        AccuracyMatrix(np.array([[0.5, np.nan], [np.nan, 0.5]]))


# --- protocol runs ---

def small_benchmark(seed=0, domains=3):
    return generate(
        SynthSpec(
            num_classes=6,
            num_domains=domains,
            dim=16,
            per_class=25,
            test_per_class=6,
            group_plan=(2, 3, 1),
            domain_shift=0.8,
            seed=seed,
        )
    )


def small_cfg(**kw):
    base = dict(epochs=15, batch_size=32, seed=0)
    base.update(kw)
    return TrainConfig(**base)


def test_protocol_single_domain():
    data = small_benchmark(domains=1)
    bank = build_dual_bank(data.guidance, 0.85)
    res = run_protocol(data.train, data.test, bank, small_cfg())
    assert res.accuracy.values.shape == (1, 1)
    assert average_accuracy(res.accuracy) == res.accuracy.values[0, 0]


def test_protocol_end_to_end_small():
    data = small_benchmark(seed=1)
    bank = build_dual_bank(data.guidance, 0.85)
    res = run_protocol(data.train, data.test, bank, small_cfg())
    assert average_accuracy(res.accuracy) >= 0.9
    id_acc = domain_id_accuracy(data.test, res.memory)
    assert float(np.mean(id_acc)) >= 0.9
    assert len(res.epoch_losses) == 3


def test_protocol_rehearsal_free_containment():
    data = small_benchmark(seed=2)
    bank = build_dual_bank(data.guidance, 0.85)
    seen = []

    def spy_trainer(view, bank_arg, cfg, initial=None):
        domains = np.unique(view.domain_ids)
        seen.append((domains.tolist(), len(view)))
        return train_domain(view, bank_arg, cfg, initial=initial)

    run_protocol(data.train, data.test, bank, small_cfg(epochs=1), train_domain_fn=spy_trainer)
    for t, (domains, count) in enumerate(seen):
        assert domains == [t]  # only domain-t rows ever reach the trainer
        assert count == int((data.train.domain_ids == t).sum())


def test_protocol_accuracy_invariant_to_test_row_order():
    data = small_benchmark(seed=3)
    bank = build_dual_bank(data.guidance, 0.85)
    res_a = run_protocol(data.train, data.test, bank, small_cfg(epochs=2))

    rng = np.random.Generator(np.random.PCG64(9))
    perm = rng.permutation(len(data.test))
    shuffled = type(data.test)(
        data.test.features[perm],
        data.test.labels[perm],
        data.test.domain_ids[perm],
        data.test.manifest,
    )
    res_b = run_protocol(data.train, shuffled, bank, small_cfg(epochs=2))
    assert np.allclose(res_a.accuracy.values, res_b.accuracy.values, equal_nan=True)


def test_protocol_missing_test_domain():
    data = small_benchmark(seed=4)
    bank = build_dual_bank(data.guidance, 0.85)
    mask = data.test.domain_ids != 2
    crippled = type(data.test)(
        data.test.features[mask],
        data.test.labels[mask],
        data.test.domain_ids[mask],
        data.test.manifest,
    )
    with pytest.raises(errors.MissingDomain):
        run_protocol(data.train, crippled, bank, small_cfg(epochs=1))


def test_protocol_manifest_mismatch():
    data = small_benchmark(seed=5)
    other = small_benchmark(seed=5, domains=2)
    bank = build_dual_bank(data.guidance, 0.85)
    with pytest.raises(errors.BadManifest):
        run_protocol(data.train, other.test, bank, small_cfg(epochs=1))


def test_vanilla_reduction_single_stage_equivalence():
    """With one domain and an all-singleton bank, the two-stage pipeline is
    exactly a flat nearest-prototype argmax over the ungrouped frame."""
    data = small_benchmark(seed=6, domains=1)
    bank = build_dual_bank(data.guidance, 1.0)
    assert bank.num_groups == bank.num_classes
    res = run_protocol(data.train, data.test, bank, small_cfg(epochs=2))
    feats = data.test.features.astype(np.float64)
    preds, _ = predict_batch(feats, res.memory, bank)
    from dualcp.calibrator import coarse_forward_batch

    x_c = coarse_forward_batch(res.memory.params[0], feats)
    flat = np.argmax(x_c @ bank.vanilla, axis=1)
    # coarse column order equals class order when every group is a singleton
    assert np.array_equal(preds, flat)


def test_memory_round_trip(tmp_path):
    data = small_benchmark(seed=7)
    bank = build_dual_bank(data.guidance, 0.85)
    res = run_protocol(data.train, data.test, bank, small_cfg(epochs=1))
    path = tmp_path / "memory.dcm"
    protocol.save_memory(res.memory, path, meta={"seed": 0})
    back, meta = protocol.load_memory(path)
    assert meta == {"seed": 0}
    assert back.num_domains == res.memory.num_domains
    for a, b in zip(back.centroids, res.memory.centroids):
        assert np.array_equal(a, b)
    for a, b in zip(back.params, res.memory.params):
        assert np.array_equal(params_to_vector(a), params_to_vector(b))
    feats = data.test.features.astype(np.float64)
    p_a, _ = predict_batch(feats, res.memory, bank)
    p_b, _ = predict_batch(feats, back, bank)
    assert np.array_equal(p_a, p_b)


def test_warm_start_protocol_runs():
    data = small_benchmark(seed=8)
    bank = build_dual_bank(data.guidance, 0.85)
    res = run_protocol(data.train, data.test, bank, small_cfg(epochs=2, warm_start=True))
    assert res.accuracy.values.shape == (3, 3)

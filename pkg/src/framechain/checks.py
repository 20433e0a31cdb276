"""Randomized property suites runnable from tests or the CLI.

Each suite returns a dict with counts and worst-case errors and raises
AssertionError on the first violated property, so the CLI can surface a
nonzero exit code with a pointed message.
"""

from __future__ import annotations

import numpy as np

from . import crf, extractor, oracles


def run_crf_oracle_suite(num_instances=200, seed=0):
    """Inference vs exhaustive enumeration on random small instances."""
    rng = np.random.default_rng(seed)
    worst_lz = worst_node = worst_edge = 0.0
    for i in range(num_instances):
        K = int(rng.integers(2, 5))
        T = int(rng.integers(1, 7))
        d = int(rng.integers(1, 4))
        label_set = crf.LabelSet(tuple("c%d" % j for j in range(K)))
        model = crf.CrfModel(label_set, rng.normal(size=(K, d)),
                             rng.normal(size=K), rng.normal(size=(K, K)))
        obs = crf.ObservationSequence(rng.normal(size=(T, d)))

        lz = crf.log_partition(model, obs)
        node_ref, edge_ref, lz_ref = oracles.brute_force_marginals(model, obs)
        rel = abs(lz - lz_ref) / max(abs(lz_ref), 1e-300)
        worst_lz = max(worst_lz, rel)
        assert rel <= 1e-9, \
            "log partition off by %g (instance %d)" % (rel, i)

        marg = crf.forward_backward(model, obs)
        node_err = float(np.max(np.abs(marg.node - node_ref)))
        worst_node = max(worst_node, node_err)
        assert node_err <= 1e-9, \
            "node marginals off by %g (instance %d)" % (node_err, i)
        if T > 1:
            edge_err = float(np.max(np.abs(marg.edge - edge_ref)))
            worst_edge = max(worst_edge, edge_err)
            assert edge_err <= 1e-9, \
                "edge marginals off by %g (instance %d)" % (edge_err, i)

        decoded = crf.viterbi_decode(model, obs)
        ref = oracles.brute_force_viterbi(model, obs)
        assert decoded == ref, "decode mismatch (instance %d)" % i
    return {"instances": num_instances, "worst_log_partition_rel": worst_lz,
            "worst_node_abs": worst_node, "worst_edge_abs": worst_edge}


def run_crf_gradient_suite(num_instances=50, seed=1, step=1e-5, tol=1e-6):
    """Analytic CRF gradient vs central finite differences."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(num_instances):
        K = int(rng.integers(2, 4))
        d = int(rng.integers(1, 3))
        label_set = crf.LabelSet(tuple("c%d" % j for j in range(K)))
        model = crf.CrfModel(label_set, rng.normal(size=(K, d)),
                             rng.normal(size=K), rng.normal(size=(K, K)))
        items = []
        for _ in range(int(rng.integers(1, 4))):
            T = int(rng.integers(1, 6))
            items.append((crf.ObservationSequence(rng.normal(size=(T, d))),
                          crf.LabelSequence(rng.integers(0, K, size=T))))
        sigma2 = float(rng.uniform(1.0, 50.0))
        dataset = crf.RegularizedDataset(items, sigma2=sigma2)

        theta = model.to_vector()
        grad = crf.objective_gradient(model, dataset)
        for j in range(theta.size):
            up, dn = theta.copy(), theta.copy()
            up[j] += step
            dn[j] -= step
            fd = (crf.objective(crf.CrfModel.from_vector(label_set, d, up),
                                dataset)
                  - crf.objective(crf.CrfModel.from_vector(label_set, d, dn),
                                  dataset)) / (2 * step)
            rel = abs(grad[j] - fd) / max(abs(fd), 1.0)
            worst = max(worst, rel)
            assert rel <= tol, \
                "gradient component %d off by %g (instance %d)" % (j, rel, i)
    return {"instances": num_instances, "worst_rel_error": worst}


def run_extractor_gradient_suite(seed=2, step=1e-5, tol=1e-6):
    """Full-parameter finite-difference check on a tiny extractor."""
    rng = np.random.default_rng(seed)
    config = extractor.ExtractorConfig(
        num_classes=2, input_size=(8, 8, 1), feature_dim=4,
        stem_channels=(2, 3), stages=((1, 3, 2),), dropout_rate=0.0,
        seed=seed)
    model = extractor.ExtractorModel(config)
    batch = rng.uniform(size=(2, 8, 8, 1))
    labels = rng.integers(0, 2, size=2)
    _, grads = extractor.backward(model, batch, labels, mode="train")
    worst = 0.0
    checked = 0
    for name, layer, key in model.named_parameters():
        flat = layer.params[key].ravel()
        g = grads[name].ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp, _ = extractor.backward(model, batch, labels, mode="train")
            flat[i] = orig - step
            fm, _ = extractor.backward(model, batch, labels, mode="train")
            flat[i] = orig
            fd = (fp - fm) / (2 * step)
            rel = abs(g[i] - fd) / max(abs(fd), 1.0)
            worst = max(worst, rel)
            checked += 1
            assert rel <= tol, "%s[%d] off by %g" % (name, i, rel)
    return {"parameters_checked": checked, "worst_rel_error": worst}

"""Smoke test for the jagrec Python extension.

Build and install first:  maturin develop -m crates/py/Cargo.toml
"""

import math
import random

import jagrec


def dense_attention(q, k, v, lengths, heads, hd):
    """Per-row causal attention computed straight from the definition."""
    width = heads * hd
    out = []
    start = 0
    for n in lengths:
        for a in range(n):
            row = [0.0] * width
            for h in range(heads):
                qa = q[(start + a) * width + h * hd:(start + a) * width + (h + 1) * hd]
                scores = []
                for b in range(a + 1):
                    kb = k[(start + b) * width + h * hd:(start + b) * width + (h + 1) * hd]
                    scores.append(sum(x * y for x, y in zip(qa, kb)) / math.sqrt(hd))
                m = max(scores)
                w = [math.exp(s - m) for s in scores]
                z = sum(w)
                for b, wb in enumerate(w):
                    vb = v[(start + b) * width + h * hd:(start + b) * width + (h + 1) * hd]
                    for x in range(hd):
                        row[h * hd + x] += wb / z * vb[x]
            out.extend(row)
        start += n
    return out


def main():
    rng = random.Random(0)
    lengths, heads, hd = [3, 1, 5], 2, 4
    n = sum(lengths) * heads * hd
    q, k, v = ([rng.uniform(-1, 1) for _ in range(n)] for _ in range(3))
    jq, jk, jv = (jagrec.JaggedTensor(x, lengths, heads * hd) for x in (q, k, v))
    assert len(jq) == 3 and jq.lengths == lengths and jq.offsets == [0, 3, 4, 9]
    out, scores, padded = jagrec.jagged_attention(jq, jk, jv, heads, hd)
    assert scores == sum(l * l for l in lengths) and padded == 3 * 25
    err = max(abs(a - b) for a, b in zip(out.values, dense_attention(q, k, v, lengths, heads, hd)))
    assert err < 1e-10, err
    assert len(jq.to_dense(5)[1]) == 5

    full, peak = jagrec.neg_memory_model(8, 8192, 1024, 128, 4, 100)
    assert full == 34_359_738_368 and peak < full

    t, r, d = 23, 3, 4
    o = [rng.uniform(-1, 1) for _ in range(t * d)]
    neg = [rng.uniform(-1, 1) for _ in range(t * r * d)]
    mono = jagrec.monolithic_logits(o, neg, r, d)
    seg, high_water, transfers = jagrec.segmented_logits(o, neg, r, d, 7)
    assert seg == mono and high_water <= 2 * 7 * r * d * 8 and transfers == 4

    loss, d_pos, _, _ = jagrec.sampled_softmax_loss(1.0, [0.5, -0.5], [], 1.0)
    ref = -math.log(math.e / (math.e + math.exp(0.5) + math.exp(-0.5)))
    assert abs(loss - ref) < 1e-12 and d_pos < 0

    counts = [rng.randint(1, 500) for _ in range(256)]
    _, fixed = jagrec.fixed_count_assign(counts, 8)
    groups, balanced = jagrec.global_token_reallocate(counts, 8)
    assert sum(balanced) == sum(counts) and sorted(i for g in groups for i in g) == list(range(256))
    assert max(balanced) - min(balanced) <= max(fixed) - min(fixed)
    g = jagrec.weighted_grad_aggregate([[1.0, 2.0], [3.0, 4.0]], [1, 3])
    assert g == [2.5, 3.5]

    assert jagrec.hr_at_k([[1, 2, 3], [4, 5, 6]], [3, 9], 3) == 0.5
    assert abs(jagrec.ndcg_at_k([[1, 2, 3]], [2], 3) - 1 / math.log2(3)) < 1e-15
    assert jagrec.eval_bound(1.0, 1.0, 100.0, 0.0, 5.0) == jagrec.eval_bound(1.0, 1.0, 100.0, 0.3, 0.0)
    assert 0.0 <= jagrec.estimate_alpha([[1, 2], [2, 3], [3, 4]]) <= 1.0

    fp1, bytes1, _ = jagrec.hsp_run(3, 8, 1, seed=5)
    fp4, bytes4, cross = jagrec.hsp_run(3, 8, 4, seed=5)
    assert fp1 == fp4 and bytes4 <= bytes1 and cross == 0

    cfg = jagrec.ExperimentConfig.from_toml("seed = 9\n")
    assert cfg.seed == 9 and "seed = 9" in cfg.to_toml()
    rep = jagrec.run_experiment(cfg, "balance")
    assert rep.passed and rep.kind == "balance" and len(rep.rows) == 2
    assert rep.to_csv() == jagrec.run_experiment(cfg, "balance").to_csv()
    try:
        jagrec.ExperimentConfig.from_toml("nope = 1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown config key accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()

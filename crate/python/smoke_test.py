"""Smoke test for the anpd_py extension module.

Build and install first:
    maturin build --release -m crates/python/Cargo.toml -o dist
    pip install dist/anpd_py-*.whl
"""

import random
from collections import Counter

import anpd_py as anpd


def check_tokenizer():
    text = "Athletic Bilbao beat Real Sociedad. Athletic Bilbao moved up."
    ids = anpd.encode(text)
    assert len(ids) == len(text.encode())
    assert anpd.decode(ids) == text.encode()

    vocab = anpd.train_bpe(text * 3, 300)
    assert len(vocab) > 257
    bpe_ids = anpd.encode(text, vocab, "bpe")
    assert anpd.decode(bpe_ids, vocab) == text.encode()
    assert len(bpe_ids) < len(ids)

    words, tokens, ratio = anpd.corpus_stats(text)
    assert words == len(text.split()) and tokens == len(ids) and ratio > 1
    assert anpd.Vocab.from_json(vocab.to_json()).to_json() == vocab.to_json()


def check_ngram_store():
    rng = random.Random(3)
    seq = [rng.randrange(5) for _ in range(500)]
    store = anpd.NgramStore(seq[:100], 4)
    for t in seq[100:]:
        store.update(t)
    assert store.committed == seq
    for n in range(2, 5):
        windows = Counter(tuple(seq[i - n:i]) for i in range(n, len(seq) + 1))
        for w, c in windows.items():
            assert store.count_of(n, list(w[:-1]), w[-1]) == c
    tail = seq[-3:]
    token, level, _ = store.query_multilevel(tail)
    assert token == store.query(tail, level)
    assert all(store.query(tail, n) is None for n in range(level + 1, 5))


def check_decoding():
    text = anpd.bundled_corpus("repetitive")
    paras = [p for p in text.split("\n\n") if p.strip()]
    prompt = anpd.encode("\n\n".join(paras[:-1]) + "\n\n")
    target = anpd.encode(paras[-1])
    oracle = anpd.Oracle.replay(prompt, target, anpd.EOS_ID)

    base = anpd.baseline_decode(oracle, prompt, max_new_tokens=1024)
    fast = anpd.anpd_decode(oracle.fresh(), prompt, n=5, k=7, max_new_tokens=1024)
    assert fast.output == base.output
    assert fast.llm_calls == 1 + fast.num_steps
    m = anpd.compute_metrics(fast, base)
    assert m["speedup_sim"] > 2.0, m
    assert m["speedup_sim"] <= m["theoretical_bound"] + 1e-9
    assert abs(anpd.theoretical_bound(0.2059, 7) - 2.4413) < 5e-4
    steps = fast.steps()
    assert sum(len(s["committed"]) for s in steps) == len(fast.output)
    print(f"demo: alpha={m['alpha']:.4f} speedup_sim={m['speedup_sim']:.3f}")


def check_markov_losslessness():
    rng = random.Random(11)
    for _ in range(50):
        corpus = [rng.randrange(20) for _ in range(rng.randrange(200, 1000))]
        order = rng.randrange(1, 4)
        prompt = corpus[:rng.randrange(4, 40)]
        n, k = rng.randrange(2, 7), rng.randrange(1, 9)
        oracle = anpd.Oracle.markov(corpus, order, seed=rng.randrange(1 << 32))
        base = anpd.baseline_decode(oracle, prompt, max_new_tokens=100)
        fast = anpd.anpd_decode(oracle, prompt, n=n, k=k, max_new_tokens=100)
        assert fast.output == base.output


def check_errors():
    try:
        anpd.anpd_decode(anpd.Oracle.replay([1], [2], 0), [1], n=1)
    except ValueError:
        pass
    else:
        raise AssertionError("n=1 should be rejected")
    try:
        anpd.Oracle.external("127.0.0.1:1", timeout_ms=200)
    except RuntimeError:
        pass
    else:
        raise AssertionError("connecting to a closed port should fail")


if __name__ == "__main__":
    check_tokenizer()
    check_ngram_store()
    check_decoding()
    check_markov_losslessness()
    check_errors()
    print("smoke test passed")

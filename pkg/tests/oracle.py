"""Naive scalar-loop reference for the matching and early-score equations."""

import math

EPS = 1e-8


def dot(a, b):
    return sum(x * y for x, y in zip(a, b))


def norm(a):
    return math.sqrt(dot(a, a))


def cos(a, b):
    return dot(a, b) / (norm(a) * norm(b) + EPS)


def softmax(scores, lam):
    top = max(lam * s for s in scores)
    e = [math.exp(lam * s - top) for s in scores]
    total = sum(e)
    return [v / total for v in e]


def cross(queries, keys, lam):
    """Per query: attention over keys, attended vector, cosine to it."""
    nq, nk = len(queries), len(keys)
    c = [[max(cos(queries[i], keys[j]), 0.0) for j in range(nk)] for i in range(nq)]
    a = [[0.0] * nk for _ in range(nq)]
    for j in range(nk):
        den = math.sqrt(sum(c[i][j] ** 2 for i in range(nq)) + EPS**2)
        for i in range(nq):
            a[i][j] = c[i][j] / den
    alpha = [softmax(a[i], lam) for i in range(nq)]
    attended = [[sum(alpha[i][j] * keys[j][d] for j in range(nk)) for d in range(len(keys[0]))] for i in range(nq)]
    sims = [cos(queries[i], attended[i]) for i in range(nq)]
    return a, alpha, attended, sims


def self_attention(features, vector, beta):
    return softmax([dot(vector, f) for f in features], beta)


def match(objects, words, word_attention, object_attention, lambda1, lambda2, beta_w, beta_o):
    a, alpha, t, s_it = cross(objects, words, lambda1)
    _, alpha_dual, m, s_ij = cross(words, objects, lambda2)
    a_w = self_attention(words, word_attention, beta_w)
    a_o = self_attention(objects, object_attention, beta_o)
    return {
        "affinity": a,
        "alpha": alpha,
        "attended_text": t,
        "object_text_sims": s_it,
        "alpha_dual": alpha_dual,
        "attended_image": m,
        "image_word_sims": s_ij,
        "word_weights": a_w,
        "object_weights": a_o,
        "s_word": sum(w * s for w, s in zip(a_w, s_ij)),
        "s_object": sum(w * s for w, s in zip(a_o, s_it)),
    }


def relatedness(objects, words, word_weights):
    return [[word_weights[j] * dot(o, words[j]) for j in range(len(words))] for o in objects]


def early_score(objects, words, word_weights):
    return sum(sum(row) for row in relatedness(objects, words, word_weights))

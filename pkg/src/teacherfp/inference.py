"""Teacher inference from black-box responses.

For each candidate extractor the attacker sends fingerprint pairs and
collects label pairs. Pairs answered with the same label form the
matching set; its proportion, the eccentricity of the proportion vector,
and the matching set's empirical entropy quantify how much belief the
responses carry. The robust variant additionally demands statistical
evidence against the null "the target is a random classifier": after
dropping the matching set's most frequent label (the supporting set), a
supporting set of at least ceil(log2(1/alpha)) labels bounds the
likelihood of the observed responses under the null by alpha. A sharper
variant multiplies per-rank bounds: with matching-set classes relabeled
1..c by descending frequency, the null likelihood is at most
prod_{i>=2} (1/i)^{n_i}.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .blackbox import ProtocolError, TransportError


class Decision(Enum):
    REJECT_H0 = "reject-h0"
    CANNOT_REJECT = "cannot-reject"


@dataclass(frozen=True)
class ResponsePair:
    y: int
    y2: int

    @property
    def matched(self):
        return self.y == self.y2


@dataclass
class MatchingSet:
    labels: tuple            # multiset: y_i of every pair with y_i == y'_i
    candidate: str = ""
    n_pairs: int = 0

    @property
    def p_match(self):
        return len(self.labels) / self.n_pairs if self.n_pairs else 0.0

    def __len__(self):
        return len(self.labels)


@dataclass
class SupportingSet:
    labels: tuple
    removed: int | None      # the most frequent matching-set label

    def __len__(self):
        return len(self.labels)


@dataclass
class TestResult:
    decision: Decision
    variant: str
    alpha: float
    support_size: int
    threshold: int
    statistic: float | None = None     # precise variant: sum_i>=2 n_i ln i
    bound: float | None = None         # ln(1/alpha)

    @property
    def rejected(self):
        return self.decision is Decision.REJECT_H0


@dataclass
class CandidateScore:
    candidate: str
    p_match: float
    entropy: float
    support_size: int
    matching: MatchingSet
    support: SupportingSet
    test: TestResult | None = None


@dataclass
class FingerprintVector:
    scores: list

    @property
    def p_values(self):
        return [s.p_match for s in self.scores]

    def __len__(self):
        return len(self.scores)


@dataclass(frozen=True)
class RobustConfig:
    alpha: float = 0.01
    variant: str = "simple"            # "simple" | "precise"
    schedule: tuple = (10, 20, 50)     # strictly increasing pair budgets
    max_budget: int = 50

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must be in (0,1)")
        if self.variant not in ("simple", "precise"):
            raise ValueError(f"unknown test variant {self.variant!r}")
        steps = [b for b in self.schedule if b <= self.max_budget]
        if not steps or list(self.schedule) != sorted(set(self.schedule)):
            raise ValueError("schedule must be strictly increasing and reach "
                             "at least one budget within max_budget")


def probe_target(endpoint, pairs):
    """Send each pair's two images; returns (responses, failed_indices).

    Responses align index-by-index with `pairs`; transport failures leave
    None at their index and are listed in failed_indices. The endpoint
    counter grows by two per pair (shape rejections also count). In-process
    endpoints advertising `supports_batch` are probed in two vectorized
    sweeps, which spends the same query count.
    """
    if not pairs:
        return [], []
    if getattr(endpoint, "supports_batch", False):
        first = endpoint.query_many(np.stack([p.probe for p in pairs]))
        second = endpoint.query_many(np.stack([p.synthetic for p in pairs]))
        return [ResponsePair(a.top1(), b.top1()) for a, b in zip(first, second)], []
    responses = [None] * len(pairs)
    failed = []
    for i, pair in enumerate(pairs):
        try:
            a = endpoint.query(pair.probe)
            b = endpoint.query(pair.synthetic)
            responses[i] = ResponsePair(a.top1(), b.top1())
        except (TransportError, ProtocolError):
            failed.append(i)
    return responses, failed


def matching_set(responses, candidate="", n_pairs=None):
    """Labels of pairs whose two responses agree (None responses skipped)."""
    labels = tuple(r.y for r in responses if r is not None and r.matched)
    return MatchingSet(labels, candidate, n_pairs if n_pairs is not None else len(responses))


def eccentricity(v):
    """(max - second max) / population standard deviation; 0 when sigma=0."""
    v = np.asarray(v, dtype=np.float64)
    if v.size < 2:
        raise ValueError("eccentricity needs at least two candidates")
    sigma = float(np.std(v))
    if sigma == 0.0:
        return 0.0
    top2 = np.sort(v)[-2:]
    return float((top2[1] - top2[0]) / sigma)


def empirical_entropy(mset):
    """Entropy in bits of the label frequencies, over observed labels."""
    labels = mset.labels if isinstance(mset, MatchingSet) else tuple(mset)
    n = len(labels)
    if n == 0:
        return 0.0
    return float(-sum((c / n) * math.log2(c / n) for c in Counter(labels).values()))


def supporting_set(mset):
    """Drop every occurrence of the single most frequent label (frequency
    ties broken toward the smallest label)."""
    labels = mset.labels if isinstance(mset, MatchingSet) else tuple(mset)
    if not labels:
        return SupportingSet((), None)
    counts = Counter(labels)
    top = max(counts.items(), key=lambda kv: (kv[1], -kv[0]))[0]
    return SupportingSet(tuple(y for y in labels if y != top), top)


def threshold_for(alpha):
    """Smallest integer K with (1/2)^K <= alpha."""
    return math.ceil(math.log2(1.0 / alpha))


def minimal_matching_set_size(alpha, c):
    """Smallest matching set that can possibly reject the null for a
    c-class target: the threshold plus the unavoidable most-frequent-label
    share."""
    k = threshold_for(alpha)
    return k + math.ceil(k / (c - 1))


def hypothesis_test(support, cfg, mset=None):
    """Decide reject/cannot-reject for H0 "the target is a random classifier".

    simple:  reject iff |support| >= ceil(log2(1/alpha)).
    precise: relabel matching-set classes by descending frequency to ranks
             1..c (count ties toward the smaller label) and reject iff
             sum_{i>=2} n_i*ln(i) >= ln(1/alpha), evaluated in log space.
    """
    k = threshold_for(cfg.alpha)
    size = len(support)
    if cfg.variant == "simple":
        decision = Decision.REJECT_H0 if size >= k else Decision.CANNOT_REJECT
        return TestResult(decision, "simple", cfg.alpha, size, k)
    if mset is None:
        raise ValueError("precise variant needs the matching set for ranking")
    stat = rank_product_statistic(mset)
    bound = math.log(1.0 / cfg.alpha)
    decision = Decision.REJECT_H0 if stat >= bound else Decision.CANNOT_REJECT
    return TestResult(decision, "precise", cfg.alpha, size, k, stat, bound)


def rank_product_statistic(mset):
    """-ln of the rank-product likelihood bound: sum over frequency ranks
    i >= 2 of n_i * ln(i)."""
    labels = mset.labels if isinstance(mset, MatchingSet) else tuple(mset)
    counts = Counter(labels)
    ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return float(sum(n * math.log(rank) for rank, (_, n) in enumerate(ordered, start=1)
                     if rank >= 2))


def score_candidate(candidate, responses, n_pairs, robust_cfg=None):
    mset = matching_set(responses, candidate, n_pairs)
    support = supporting_set(mset)
    test = hypothesis_test(support, robust_cfg, mset) if robust_cfg else None
    return CandidateScore(candidate=candidate, p_match=mset.p_match,
                          entropy=empirical_entropy(mset), support_size=len(support),
                          matching=mset, support=support, test=test)


@dataclass
class InferenceResult:
    winner: str
    winner_index: int
    vector: FingerprintVector
    eccentricity: float | None
    winner_entropy: float


def infer_teacher(vector):
    """One-of-the-best: argmax of the match proportions; ties fall to the
    higher matching-set entropy, then to the smaller candidate index."""
    if not vector.scores:
        raise ValueError("empty fingerprint vector")
    idx = max(range(len(vector.scores)),
              key=lambda i: (vector.scores[i].p_match, vector.scores[i].entropy, -i))
    ecc = eccentricity(vector.p_values) if len(vector.scores) >= 2 else None
    s = vector.scores[idx]
    return InferenceResult(s.candidate, idx, vector, ecc, s.entropy)


@dataclass
class AttackReport:
    scores: list
    vector: FingerprintVector
    inference: InferenceResult
    query_count: int
    alpha: float

    def as_dict(self):
        return {
            "per_candidate": {
                s.candidate: {"P_match": s.p_match, "entropy": s.entropy,
                              "support_size": s.support_size,
                              "decision": s.test.decision.value if s.test else None}
                for s in self.scores},
            "v_fgpt": self.vector.p_values,
            "eccentricity": self.inference.eccentricity,
            "winner": self.inference.winner,
            "query_count": self.query_count,
            "alpha": self.alpha,
        }


def attack(endpoint, pairs_by_candidate, robust_cfg=None):
    """Probe one target with every candidate's pairs and score them all."""
    robust_cfg = robust_cfg or RobustConfig()
    before = endpoint.query_count()
    scores = []
    for candidate, pairs in pairs_by_candidate.items():
        responses, _ = probe_target(endpoint, pairs)
        scores.append(score_candidate(candidate, responses, len(pairs), robust_cfg))
    vector = FingerprintVector(scores)
    return AttackReport(scores, vector, infer_teacher(vector),
                        endpoint.query_count() - before, robust_cfg.alpha)


@dataclass
class RobustResult:
    winner: str | None                 # None means Inconclusive
    decision: Decision
    budget_used: int
    report: AttackReport | None
    history: list = field(default_factory=list)

    @property
    def inconclusive(self):
        return self.winner is None


def robust_infer(endpoint, candidates, probes, cfg=None, synth_cfg=None,
                 pair_source=None):
    """Budget-escalating robust inference.

    Walk the budget schedule; at each stage extend every candidate's pair
    set, probe only the new pairs, pick the best candidate, and test its
    supporting set. Reject -> return that candidate. If the schedule ends
    without a rejection the result is Inconclusive — never a guess.

    `candidates` maps candidate id to (teacher, cut); `pair_source`
    overrides pair generation (candidate_id, teacher, cut, n_total) ->
    pairs, defaulting to feature-matching synthesis against `probes`.
    """
    from . import fpgen, zoo
    cfg = cfg or RobustConfig()
    synth_cfg = synth_cfg or fpgen.SynthesisConfig()

    if pair_source is None:
        extractors = {cid: zoo.extract_feature_map(t, cut)
                      for cid, (t, cut) in candidates.items()}

        def pair_source(cid, teacher, cut, n):
            return fpgen.generate_pairs(teacher, cut, probes, n, synth_cfg,
                                        extractor=extractors[cid])

    pair_cache = {cid: [] for cid in candidates}
    responses = {cid: [] for cid in candidates}
    history = []
    report = None
    for budget in [b for b in cfg.schedule if b <= cfg.max_budget]:
        t0 = endpoint.query_count()
        for cid, (teacher, cut) in candidates.items():
            if len(pair_cache[cid]) < budget:
                pair_cache[cid] = pair_source(cid, teacher, cut, budget)
            new = pair_cache[cid][len(responses[cid]):budget]
            got, _ = probe_target(endpoint, new)
            responses[cid].extend(got)
        scores = [score_candidate(cid, responses[cid], budget, cfg)
                  for cid in candidates]
        vector = FingerprintVector(scores)
        inference = infer_teacher(vector)
        winner_score = scores[inference.winner_index]
        report = AttackReport(scores, vector, inference,
                              endpoint.query_count() - t0, cfg.alpha)
        history.append({"budget": budget, "winner": inference.winner,
                        "support_size": winner_score.support_size,
                        "decision": winner_score.test.decision.value})
        if winner_score.test.rejected:
            return RobustResult(inference.winner, Decision.REJECT_H0, budget,
                                report, history)
    return RobustResult(None, Decision.CANNOT_REJECT,
                        history[-1]["budget"] if history else 0, report, history)


def random_classifier_monte_carlo(label_dist, trials, alpha, pairs_per_trial,
                                  seed=0, variant="simple"):
    """Empirical H0-rejection frequency for a simulated random classifier.

    Each trial draws both responses of every pair i.i.d. from `label_dist`
    and runs the full matching-set -> supporting-set -> hypothesis-test
    pipeline. The threshold bounds the likelihood of the observed response
    string, so small per-trial budgets keep this frequency at or below
    alpha; it grows with the budget (see tests for measured curves).
    """
    p = np.asarray(label_dist, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or p.sum() <= 0:
        raise ValueError("label_dist must be a probability vector")
    p = p / p.sum()
    cfg = RobustConfig(alpha=alpha, variant=variant,
                       schedule=(pairs_per_trial,), max_budget=pairs_per_trial)
    rng = np.random.default_rng([seed, 0x6D63])
    cum = np.cumsum(p)
    draws = np.searchsorted(cum, rng.random((trials, 2, pairs_per_trial)),
                            side="right")
    rejected = 0
    for t in range(trials):
        responses = [ResponsePair(int(a), int(b))
                     for a, b in zip(draws[t, 0], draws[t, 1])]
        mset = matching_set(responses)
        result = hypothesis_test(supporting_set(mset), cfg, mset)
        rejected += result.rejected
    return rejected / trials
